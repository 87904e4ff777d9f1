import json
import math

import numpy as np
import pytest

from homogenlab import ConfigError
from homogenlab.coeff import CONSTANT
from homogenlab.coeff import CoefficientField
from homogenlab.coeff import RandomFieldModel
from homogenlab.lab import AFFINE_DATA
from homogenlab.lab import BUMPY
from homogenlab.lab import DECAY_TOLERANCE
from homogenlab.lab import MANIFEST
from homogenlab.lab import RANDOM_TRIGONOMETRIC
from homogenlab.lab import DecaySettings
from homogenlab.lab import ExperimentConfig
from homogenlab.lab import RunReport
from homogenlab.lab import Table
from homogenlab.lab import _good_scale
from homogenlab.lab import boundary_function
from homogenlab.lab import canonical_json
from homogenlab.lab import decay_budget
from homogenlab.lab import fit_budget
from homogenlab.lab import run
from homogenlab.lab import table_bytes
from homogenlab.lab import verify_report
from homogenlab.lab import write_report

CONFIG = """\
[experiment]
kind = "lambda-sweep"
seed = 3
samples = 1
boundary = "affine"

[model]
model_kind = "iid-uniform-tensor"
contrast = 4.0
lambda_band = 0.5

[grid]
elements_per_cell = 4

[ladders]
epsilons = [0.5]
lambdas = [1.0, 100.0]

[solver]
tolerance = 1e-9

[domain]
profile = [[0.1, 0.0]]
"""


def tables_of(out):
    return {path.name for path in out.iterdir()}


def read_table(path):
    lines = path.read_text().splitlines()
    header = [line for line in lines if line.startswith('#')]
    body = [line.split(',') for line in lines if not line.startswith('#')]
    return header, body[0], body[1:]


@pytest.mark.parametrize(
    'options',
    [
        {'kind': 'everything'},
        {'kind': 'sample', 'seed': -1},
        {'kind': 'sample', 'samples': 0},
        {'kind': 'sample', 'boundary': 'random'},
        {'kind': 'sample', 'epsilons': ()},
        {'kind': 'sample', 'lambdas': (-1.0,)},
        {'kind': 'sample', 'thetas': (1.0,)},
        {'kind': 'sample', 'scales': (0.0,)},
        {'kind': 'sample', 'ell_max': -1},
    ],
)
def test_invalid_config(options):
    with pytest.raises(ValueError):
        ExperimentConfig(**options)


def test_config_from_toml(tmp_path):
    path = tmp_path / 'sweep.toml'
    path.write_text(CONFIG)
    config = ExperimentConfig.from_toml(path)
    assert config.kind == 'lambda-sweep'
    assert list(config.seeds) == [3]
    assert config.model.lambda_band == 0.5
    assert config.lambdas == (1.0, 100.0)
    assert config.settings.tolerance == 1e-9
    assert config.domain.profile == ((0.1, 0.0),)
    assert config.content_hash() == ExperimentConfig.from_toml(path, 'lambda-sweep').content_hash()


def test_config_kind_mismatch(tmp_path):
    path = tmp_path / 'sweep.toml'
    path.write_text(CONFIG)
    with pytest.raises(ConfigError, match='not'):
        ExperimentConfig.from_toml(path, 'sample')


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match='does not exist'):
        ExperimentConfig.from_toml(tmp_path / 'missing.toml')
    broken = tmp_path / 'broken.toml'
    broken.write_text('[experiment\nkind = ')
    with pytest.raises(ConfigError):
        ExperimentConfig.from_toml(broken)
    with pytest.raises(ConfigError, match='sections'):
        ExperimentConfig.from_dict({'plots': {}}, 'sample')
    with pytest.raises(ConfigError, match='keys'):
        ExperimentConfig.from_dict({'grid': {'threads': 4}}, 'sample')
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({'model': {'contrast': 100.0}}, 'sample')
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({'ladders': {'thetas': [2.0]}}, 'sample')


def test_defaults_from_dict():
    config = ExperimentConfig.from_dict({}, 'sample')
    assert config == ExperimentConfig('sample')
    assert config.content_hash() == ExperimentConfig('sample').content_hash()


def test_hash_follows_content():
    config = ExperimentConfig('sample')
    assert config.with_overrides(seed=1).content_hash() != config.content_hash()
    assert config.with_overrides().content_hash() == config.content_hash()
    assert list(config.with_overrides(seed=5, samples=3).seeds) == [5, 6, 7]
    with pytest.raises(ConfigError):
        config.with_overrides(samples=0)


def test_base_tensor_from_nested_lists():
    data = {'model': {'model_kind': 'constant', 'contrast': 1.0, 'base_tensor': np.eye(4).tolist()}}
    config = ExperimentConfig.from_dict(data, 'sample')
    assert config.model.base_tensor == tuple(np.eye(4).ravel())


def test_canonical_json():
    assert canonical_json({'b': math.nan, 'a': (1, np.float64(0.5)), 'c': np.int64(2), 'd': np.bool_(True)}) == (
        b'{"a":[1,0.5],"b":null,"c":2,"d":true}'
    )


def test_table_bytes():
    config = ExperimentConfig('sample')
    report = RunReport(config, config.content_hash(), {}, {}, 0.0, '1.2.3')
    content = table_bytes('demo', Table(('a', 'b', 'c'), [(1, 0.25, True)]), report).decode()
    assert content.splitlines() == [
        '# experiment: sample',
        '# table: demo',
        f'# config_hash: {config.content_hash()}',
        '# version: 1.2.3',
        'a,b,c',
        '1,0.25,true',
    ]


def test_boundary_functions():
    points = np.array([[0.5, -0.25], [1.0, 1.0]])
    assert np.allclose(boundary_function('affine')(points), points @ AFFINE_DATA.T)
    wave = boundary_function('trigonometric')(points)
    assert wave.shape == (2, 2)
    assert wave[1].tolist() == pytest.approx([0.0, 1.0], abs=1e-15)
    first = boundary_function('random-trigonometric', 1)(points)
    assert np.array_equal(first, boundary_function('random-trigonometric', 1)(points))
    assert not np.array_equal(first, boundary_function('random-trigonometric', 2)(points))
    with pytest.raises(ValueError):
        boundary_function('polynomial')


def test_decay_budget():
    assert decay_budget(1.0, 0.25, 2.0) == (0.0, pytest.approx(1.0))
    zeta_term, proxy_term = decay_budget(0.25, 0.0625, 2.0, 0.5, 2.0, 3.0)
    assert zeta_term == pytest.approx(6.0)
    assert proxy_term == pytest.approx(1.0)


def test_fit_budget():
    gamma, constant, fitted = fit_budget([0.5, 0.25], [0.2, 0.05])
    assert gamma == pytest.approx(2.0)
    assert constant == pytest.approx(0.8)
    assert fitted
    assert fit_budget([0.5, 0.25], [-0.1, 0.0]) == (1.0, 0.0, False)
    assert fit_budget([0.5, 0.25], [0.2, -0.1], gamma=0.5) == (0.5, pytest.approx(0.2 / math.sqrt(0.5)), False)
    assert fit_budget([0.5, 0.25], [0.2, -0.1]) == (1.0, pytest.approx(0.4), False)


@pytest.mark.parametrize('options', [{'geometry': 'cube'}, {'gamma': 0.0}, {'gamma': -1.0}])
def test_invalid_decay_settings(options):
    with pytest.raises(ValueError):
        DecaySettings(**options)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({'decay': options}, 'excess-decay')


def test_good_scale_stops_at_first_jump():
    assert _good_scale([1.0, 0.5, 0.25, 0.125], [1.0, 1.5, 3.0, 1.0]) == 0.5
    assert _good_scale([1.0, 0.5, 0.25], [1.0, 1.9, 2.0]) == 0.25
    assert _good_scale([1.0, 0.5], [1.0, 2.5]) == 1.0


def test_sample_run_and_report(tmp_path):
    config = ExperimentConfig('sample', epsilons=(0.5, 0.25))
    report = run(config)
    out = tmp_path / 'out'
    write_report(report, out)
    assert tables_of(out) == {'sample.csv', MANIFEST, 'field_0_0.hlab', 'field_0_1.hlab', 'field_1_0.hlab', 'field_1_1.hlab'}
    header, columns, rows = read_table(out / 'sample.csv')
    assert header[0] == '# experiment: sample'
    assert columns[:3] == ['seed', 'epsilon', 'cells']
    assert len(rows) == 4
    assert all(row[5] == 'true' for row in rows)
    field = CoefficientField.from_bytes((out / 'field_1_1.hlab').read_bytes())
    assert field.epsilon == 0.25
    manifest, mismatched = verify_report(out)
    assert mismatched == []
    assert manifest['config_hash'] == config.content_hash()
    assert set(manifest['outputs']) == tables_of(out) - {MANIFEST}


def test_same_config_same_tables(tmp_path):
    config = ExperimentConfig('sample', seed=4, samples=1)
    write_report(run(config), tmp_path / 'first')
    write_report(run(config), tmp_path / 'second')
    first = json.loads((tmp_path / 'first' / MANIFEST).read_text())
    second = json.loads((tmp_path / 'second' / MANIFEST).read_text())
    assert first['outputs'] == second['outputs']


def test_verify_detects_tampering(tmp_path):
    write_report(run(ExperimentConfig('sample', samples=1)), tmp_path)
    path = tmp_path / 'sample.csv'
    path.write_text(path.read_text() + '9,9,9\n')
    _, mismatched = verify_report(tmp_path)
    assert mismatched == ['sample.csv']
    (tmp_path / 'field_0_0.hlab').unlink()
    _, mismatched = verify_report(tmp_path)
    assert mismatched == ['field_0_0.hlab', 'sample.csv']


def test_verify_needs_manifest(tmp_path):
    with pytest.raises(ConfigError):
        verify_report(tmp_path)


def test_lambda_sweep():
    config = ExperimentConfig('lambda-sweep', samples=1, elements_per_cell=4, epsilons=(0.5,), lambdas=(0.0, 100.0, 1000.0))
    report = run(config)
    rows = report.tables['solve'].rows
    assert [row[1] for row in rows] == [0.0, 100.0, 1000.0]
    assert all(row[5] > 0 for row in rows)
    (summary,) = report.tables['solve_summary'].rows
    assert 1.0 <= summary[1] < 3.0
    assert summary[2] < 0
    assert report.aggregates['lambda_rate_slope']['count'] == 1


def test_lambda_sweep_is_uniform_in_lambda():
    config = ExperimentConfig('lambda-sweep', samples=1, elements_per_cell=4, epsilons=(0.5,), lambdas=(1.0, 1e2, 1e4, 1e6))
    report = run(config)
    ratios = [row[5] for row in report.tables['solve'].rows]
    assert max(ratios) / min(ratios) < 3.0
    assert report.aggregates['max_ratio_variation'] < 3.0


def test_lambda_sweep_needs_resolution():
    with pytest.raises(ConfigError):
        run(ExperimentConfig('lambda-sweep', samples=1, elements_per_cell=1, epsilons=(0.25,), half_width=0.5))


def test_expansion_run():
    config = ExperimentConfig('expansion', samples=1, elements_per_cell=4, epsilons=(0.5,), lambdas=(1e4,), ell_max=2)
    report = run(config)
    assert len(report.tables['expansion'].rows) == 3
    (summary,) = report.tables['expansion_summary'].rows
    assert summary[2] == 3
    assert summary[4] is False
    assert report.aggregates == {'diverged': 0, 'runs': 1}
    with pytest.raises(ConfigError):
        run(ExperimentConfig('expansion', samples=1, lambdas=(0.0,)))


def test_cell_quantities_run():
    config = ExperimentConfig('cell-quantities', levels=(0,), elements_per_cell=4, lambdas=(1.0, 10.0))
    report = run(config)
    table = report.tables['cell']
    assert table.columns[-2:] == ('mu_lambda_1', 'mu_lambda_10')
    assert len(table.rows) == 2
    assert report.aggregates['min_J'] >= -1e-10


def test_homogenize_run(tmp_path):
    config = ExperimentConfig('homogenize', levels=(0,), elements_per_cell=4, lambdas=(10.0, 100.0))
    report = run(config)
    assert len(report.tables['homogenize'].rows) == 16 * 3
    document = json.loads(report.artifacts['homogenize.json'])
    assert set(document['0']) == {'A_hat', 'A_bar_lambda', 'distance'}
    assert len(document['0']['A_bar_lambda']) == 2
    assert len(report.aggregates['level_0']['eigenvalues']) == 4
    write_report(report, tmp_path)
    assert 'homogenize.json' in tables_of(tmp_path)
    with pytest.raises(ConfigError):
        run(ExperimentConfig('homogenize', samples=1))


def test_homogenize_slope_skips_zero_lambda():
    config = ExperimentConfig('homogenize', levels=(0,), elements_per_cell=4, lambdas=(0.0, 10.0, 100.0))
    report = run(config)
    document = json.loads(report.artifacts['homogenize.json'])
    assert len(document['0']['distance']) == 3
    level = report.aggregates['level_0']
    assert math.isfinite(level['distance_slope'])
    assert math.isnan(level['distance_slope_ci'])


def test_homogenization_rate_run():
    config = ExperimentConfig('homog-rate', levels=(0,), elements_per_cell=4, epsilons=(0.5, 0.25), lambdas=(1.0,))
    report = run(config)
    table = report.tables['rate']
    assert [row[0] for row in table.rows] == [0.5, 0.25]
    assert all(row[-1] == 2 for row in table.rows)
    assert report.aggregates['lambda'] == 1.0


def test_corrector_rate_run():
    config = ExperimentConfig('corrector-rate', levels=(0, 1), elements_per_cell=4)
    report = run(config)
    rows = report.tables['corrector'].rows
    assert [row[1] for row in rows] == [0, 0, 1, 1]
    assert all(row[2] >= 0 for row in rows)
    assert set(report.aggregates) == {'level_0', 'level_1'}


def test_interior_lipschitz_run():
    config = ExperimentConfig('interior-lipschitz', samples=1, elements_per_cell=4, epsilons=(0.125,), lambdas=(10.0,))
    report = run(config)
    rows = report.tables['interior'].rows
    assert [row[2] for row in rows] == [1.0, 0.5]
    assert math.isnan(rows[0][6])
    assert rows[1][6] > 0
    (summary,) = report.tables['interior_summary'].rows
    assert summary[3] in (1.0, 0.5)
    assert report.aggregates['epsilon_0.125']['count'] == 1


def test_boundary_lipschitz_run():
    config = ExperimentConfig.from_dict(
        {
            'experiment': {'samples': 1},
            'grid': {'elements_per_cell': 4},
            'ladders': {'epsilons': [0.0625], 'lambdas': [10.0]},
            'domain': {'radius': 1.0, 'bump_amplitude': 0.25},
        },
        'boundary-lipschitz',
    )
    report = run(config)
    rows = report.tables['boundary'].rows
    assert [row[2] for row in rows] == [0.5, 0.25]
    assert all(row[6] > 0 for row in rows)
    assert math.isnan(rows[0][8])
    (summary,) = report.tables['boundary_summary'].rows
    assert summary[4] >= 0
    assert 'perturbation_exponent' in report.aggregates


def test_boundary_lipschitz_needs_resolution():
    with pytest.raises(ConfigError):
        run(ExperimentConfig('boundary-lipschitz', samples=1, elements_per_cell=2))


def test_excess_decay_run():
    config = ExperimentConfig('excess-decay', samples=1, epsilons=(0.25,), thetas=(0.5, 0.0625), lambdas=(10.0,))
    report = run(config)
    table = report.tables['excess']
    assert table.columns[-5:] == ('zeta', 'zeta_term', 'proxy_term', 'budget', 'decays_with_budget')
    rows = table.rows
    assert [(row[1], row[2]) for row in rows] == [(0.5, 1.0), (0.5, 0.5)]
    for row in rows:
        assert row[5] == pytest.approx(row[4] - 0.5 * row[3])
        assert row[7] == pytest.approx(row[2] ** 0.5 + (0.25 / row[2]) ** 0.5)
        assert row[9] == pytest.approx((0.25 / row[2]) ** 0.5 * row[3])
        assert row[10] == pytest.approx(row[8] + row[9] + DECAY_TOLERANCE)
        assert row[11] or not row[6]
    assert report.aggregates['geometry'] == 'ball'
    assert set(report.aggregates['budget']) == {'gamma', 'constant', 'fitted'}
    assert report.aggregates['budget_fraction'] >= report.aggregates['decay_fraction']
    assert report.aggregates['pairs'] == 2


def test_excess_decay_with_constant_coefficients():
    config = ExperimentConfig(
        'excess-decay',
        samples=2,
        boundary=RANDOM_TRIGONOMETRIC,
        model=RandomFieldModel(CONSTANT),
        elements_per_cell=16,
        epsilons=(0.25,),
        thetas=(0.125,),
        lambdas=(1.0,),
    )
    report = run(config)
    rows = report.tables['excess'].rows
    assert [(row[0], row[2]) for row in rows] == [(0, 1.0), (1, 1.0)]
    for row in rows:
        assert row[4] <= 0.5 * row[3] + DECAY_TOLERANCE
    assert report.aggregates['decay_fraction'] == 1.0


def test_excess_decay_on_bumpy_domain():
    config = ExperimentConfig.from_dict(
        {
            'experiment': {'samples': 1},
            'grid': {'elements_per_cell': 4},
            'ladders': {'epsilons': [0.0625], 'lambdas': [10.0], 'thetas': [0.5], 'scales': [0.5]},
            'domain': {'radius': 1.0, 'bump_amplitude': 0.25},
            'decay': {'geometry': BUMPY, 'gamma': 0.5},
        },
        'excess-decay',
    )
    assert config.as_dict()['decay'] == {'geometry': BUMPY, 'gamma': 0.5}
    report = run(config)
    (row,) = report.tables['excess'].rows
    assert (row[1], row[2]) == (0.5, 0.5)
    assert row[3] > 0
    assert row[10] == pytest.approx(row[8] + row[9] + DECAY_TOLERANCE)
    assert row[11] or not row[6]
    assert report.aggregates['geometry'] == BUMPY
    assert report.aggregates['budget']['gamma'] == 0.5
    assert not report.aggregates['budget']['fitted']


def test_excess_decay_on_bumpy_domain_needs_resolution():
    with pytest.raises(ConfigError):
        run(ExperimentConfig('excess-decay', samples=1, elements_per_cell=2, epsilons=(0.25,), decay=DecaySettings(BUMPY)))


def test_excess_decay_needs_scales():
    with pytest.raises(ConfigError):
        run(ExperimentConfig('excess-decay', samples=1, epsilons=(0.25,), thetas=(0.0625,)))
