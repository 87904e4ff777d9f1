"""
Experiment configuration, the seeded experiment runs and report emission.
"""
import csv
import dataclasses
import hashlib
import io
import json
import math
import sys
import time
from dataclasses import dataclass
from dataclasses import field as dataclass_field
from logging import getLogger
from pathlib import Path
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Tuple

import numpy as np

from . import ConfigError
from . import GeometryError
from . import UnderResolved
from . import __version__
from .coeff import RandomFieldModel
from .coeff import required_cells
from .coeff import sample_field
from .coeff import split_compressibility
from .coeff import verify_ellipticity
from .geometry import BumpyDomainParams
from .geometry import build_ball_mask
from .geometry import build_box_mask
from .geometry import build_bumpy_domain
from .geometry import cap_domains
from .geometry import normal_drift
from .geometry import sandwich_constant
from .geometry import zeta
from .grid import DiscreteVectorField
from .grid import filtered_pressure
from .grid import vector_laplacian
from .homog import cube_field
from .homog import estimate_A_bar_lambda
from .homog import estimate_A_hat
from .homog import finite_volume_corrector
from .homog import fit_slope
from .homog import homogenization_rate_experiment
from .homog import map_seeds
from .homog import subadditive_sample
from .norms import boundary_excess
from .norms import caccioppoli_residual
from .norms import gradient_mean_square
from .norms import interior_excess
from .norms import mean_square
from .solve import SolverSettings
from .solve import expansion_solve
from .solve import lambda_rate
from .solve import solve_elasticity_dirichlet

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger_for_config = getLogger(f"{__name__}.config")
logger_for_run = getLogger(f"{__name__}.run")
logger_for_report = getLogger(f"{__name__}.report")

KINDS = (
    'sample',
    'lambda-sweep',
    'expansion',
    'cell-quantities',
    'homogenize',
    'homog-rate',
    'corrector-rate',
    'interior-lipschitz',
    'boundary-lipschitz',
    'excess-decay',
)
AFFINE = 'affine'
TRIGONOMETRIC = 'trigonometric'
RANDOM_TRIGONOMETRIC = 'random-trigonometric'
BOUNDARY_KINDS = (AFFINE, TRIGONOMETRIC, RANDOM_TRIGONOMETRIC)

AFFINE_DATA = np.array([[1.0, 0.5], [0.25, -0.5]])
AFFINE_DATA.setflags(write=False)
# Boundary direction q of the bumpy-domain data (x₂ - ψ(x₁))₊ q.
BOUNDARY_DIRECTION = np.array([1.0, 0.5])
BOUNDARY_DIRECTION.setflags(write=False)
# Ratio above the large-scale plateau that ends the range of good scales.
PLATEAU_FACTOR = 2.0
DECAY_TOLERANCE = 1e-6
# Exponent of the ζ budget term when it cannot be fitted.
DEFAULT_BUDGET_EXPONENT = 1.0
BALL = 'ball'
BUMPY = 'bumpy'
GEOMETRIES = (BALL, BUMPY)
MANIFEST = 'manifest.json'


@dataclass(frozen=True)
class BumpyShape:
    """The ``[domain]`` section: bumpy domain parameters except ``ε`` and the seed."""

    alpha: float = 0.5
    slope: float = 0.0
    profile: Tuple[Tuple[float, float], ...] = ()
    bump_amplitude: float = 0.5
    lipschitz_bound: float = 1.0
    radius: float = 2.0

    def params(self, epsilon, seed):
        return BumpyDomainParams(
            epsilon, self.alpha, self.slope, self.profile, self.bump_amplitude, self.lipschitz_bound, seed, self.radius
        )


@dataclass(frozen=True)
class DecaySettings:
    """
    The ``[decay]`` section of excess-decay runs.

    :param geometry: ``ball`` (interior excess on ``B_r``) or ``bumpy`` (boundary excess on ``D_r``).
    :param gamma: exponent of the ``ζ_α(r, ε)^γ`` budget term; fitted from the run when omitted.
    """

    geometry: str = BALL
    gamma: Optional[float] = None

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise ValueError(f"geometry must be one of {GEOMETRIES}, got {self.geometry!r}.")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma!r}.")


@dataclass(frozen=True)
class ExperimentConfig:
    """
    A complete, hashable experiment description; see :meth:`from_toml` for the file layout.
    """

    kind: str
    seed: int = 0
    samples: int = 2
    boundary: str = TRIGONOMETRIC
    model: RandomFieldModel = dataclass_field(default_factory=RandomFieldModel)
    elements_per_cell: int = 8
    half_width: float = 0.5
    epsilons: Tuple[float, ...] = (0.25,)
    lambdas: Tuple[float, ...] = (1.0,)
    scales: Tuple[float, ...] = ()
    levels: Tuple[int, ...] = (1,)
    thetas: Tuple[float, ...] = (0.125, 0.0625)
    settings: SolverSettings = dataclass_field(default_factory=SolverSettings)
    domain: BumpyShape = dataclass_field(default_factory=BumpyShape)
    ell_max: int = 4
    decay: DecaySettings = dataclass_field(default_factory=DecaySettings)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}.")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed!r}.")
        if self.samples < 1:
            raise ValueError(f"samples must be positive, got {self.samples!r}.")
        if self.boundary not in BOUNDARY_KINDS:
            raise ValueError(f"boundary must be one of {BOUNDARY_KINDS}, got {self.boundary!r}.")
        if self.elements_per_cell < 1:
            raise ValueError(f"elements_per_cell must be positive, got {self.elements_per_cell!r}.")
        if not self.half_width > 0:
            raise ValueError(f"half_width must be positive, got {self.half_width!r}.")
        for name in ('epsilons', 'lambdas', 'levels', 'thetas'):
            values = tuple(getattr(self, name))
            if not values:
                raise ValueError(f"The {name} ladder must not be empty.")
            object.__setattr__(self, name, values)
        object.__setattr__(self, 'scales', tuple(self.scales))
        if any(not value > 0 for value in self.epsilons + self.scales):
            raise ValueError("epsilons and scales must be positive.")
        if any(value < 0 for value in self.lambdas):
            raise ValueError(f"lambdas must be nonnegative, got {self.lambdas!r}.")
        if any(value < 0 for value in self.levels):
            raise ValueError(f"levels must be nonnegative, got {self.levels!r}.")
        if any(not 0 < value < 1 for value in self.thetas):
            raise ValueError(f"thetas must lie in (0, 1), got {self.thetas!r}.")
        if self.ell_max < 0:
            raise ValueError(f"ell_max must be nonnegative, got {self.ell_max!r}.")

    @property
    def seeds(self):
        return range(self.seed, self.seed + self.samples)

    def with_overrides(self, seed=None, samples=None):
        changes = {}
        if seed is not None:
            changes['seed'] = seed
        if samples is not None:
            changes['samples'] = samples
        try:
            return dataclasses.replace(self, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def as_dict(self):
        return {
            'experiment': {'kind': self.kind, 'seed': self.seed, 'samples': self.samples, 'boundary': self.boundary},
            'model': dataclasses.asdict(self.model),
            'grid': {'elements_per_cell': self.elements_per_cell, 'half_width': self.half_width},
            'ladders': {
                'epsilons': list(self.epsilons),
                'lambdas': list(self.lambdas),
                'scales': list(self.scales),
                'levels': list(self.levels),
                'thetas': list(self.thetas),
            },
            'solver': dataclasses.asdict(self.settings),
            'domain': dataclasses.asdict(self.domain),
            'expansion': {'ell_max': self.ell_max},
            'decay': dataclasses.asdict(self.decay),
        }

    def content_hash(self):
        return hashlib.sha256(canonical_json(self.as_dict())).hexdigest()

    @classmethod
    def from_dict(cls, data, kind=None):
        """
        Build a config from TOML-shaped data; ``kind`` fills in a missing ``[experiment] kind``.
        """
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"Unknown config sections: {sorted(unknown)}.")
        for section, keys in SECTIONS.items():
            extra = set(data.get(section, {})) - set(keys)
            if extra:
                raise ConfigError(f"Unknown keys in [{section}]: {sorted(extra)}.")
        experiment = dict(data.get('experiment', {}))
        configured = experiment.pop('kind', None)
        if kind is not None and configured is not None and configured != kind:
            raise ConfigError(f"Config is for {configured!r} experiments, not {kind!r}.")
        ladders = {name: tuple(values) for name, values in data.get('ladders', {}).items()}
        domain = dict(data.get('domain', {}))
        if 'profile' in domain:
            domain['profile'] = tuple(tuple(pair) for pair in domain['profile'])
        model = dict(data.get('model', {}))
        if model.get('base_tensor') is not None:
            model['base_tensor'] = tuple(np.ravel(model['base_tensor']).tolist())
        try:
            return cls(
                kind=configured or kind,
                model=RandomFieldModel(**model),
                settings=SolverSettings(**data.get('solver', {})),
                domain=BumpyShape(**domain),
                decay=DecaySettings(**data.get('decay', {})),
                **experiment,
                **data.get('grid', {}),
                **ladders,
                **data.get('expansion', {}),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"Invalid config: {exc}") from exc

    @classmethod
    def from_toml(cls, path, kind=None):
        """
        Read a TOML file with the sections ``[experiment]``, ``[model]``, ``[grid]``, ``[ladders]``, ``[solver]``,
        ``[domain]``, ``[expansion]`` and ``[decay]``.
        """
        path = Path(path)
        try:
            with path.open('rb') as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"Config file {str(path)!r} does not exist.") from None
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"Cannot read config file {str(path)!r}: {exc}") from exc
        config = cls.from_dict(data, kind)
        logger_for_config.info("Loaded %s config from %s (hash %s).", config.kind, path, config.content_hash())
        return config


SECTIONS = {
    'experiment': ('kind', 'seed', 'samples', 'boundary'),
    'model': tuple(item.name for item in dataclasses.fields(RandomFieldModel)),
    'grid': ('elements_per_cell', 'half_width'),
    'ladders': ('epsilons', 'lambdas', 'scales', 'levels', 'thetas'),
    'solver': tuple(item.name for item in dataclasses.fields(SolverSettings)),
    'domain': tuple(item.name for item in dataclasses.fields(BumpyShape)),
    'expansion': ('ell_max',),
    'decay': tuple(item.name for item in dataclasses.fields(DecaySettings)),
}


def _jsonable(value):
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


def canonical_json(data):
    return json.dumps(_jsonable(data), sort_keys=True, separators=(',', ':')).encode()


class Table(NamedTuple):
    columns: Tuple[str, ...]
    rows: List[tuple]


@dataclass
class RunReport:
    """
    :param config: the :class:`ExperimentConfig` that was run.
    :param config_hash: its content hash.
    :param tables: CSV tables by name.
    :param aggregates: JSON-compatible summary statistics.
    :param wall_clock: seconds spent.
    :param version: package version.
    :param artifacts: extra output files (name to bytes).
    """

    config: ExperimentConfig
    config_hash: str
    tables: Dict[str, Table]
    aggregates: dict
    wall_clock: float
    version: str = __version__
    artifacts: Dict[str, bytes] = dataclass_field(default_factory=dict)


def _format(value):
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def table_bytes(name, table: Table, report: RunReport):
    buffer = io.StringIO()
    buffer.write(f"# experiment: {report.config.kind}\n")
    buffer.write(f"# table: {name}\n")
    buffer.write(f"# config_hash: {report.config_hash}\n")
    buffer.write(f"# version: {report.version}\n")
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([_format(value) for value in row])
    return buffer.getvalue().encode()


def write_report(report: RunReport, out):
    """
    Write every table as ``<name>.csv``, the artifacts and ``manifest.json`` with their SHA-256 hashes.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {}
    contents = {f"{name}.csv": table_bytes(name, table, report) for name, table in report.tables.items()}
    contents.update(report.artifacts)
    for name, content in sorted(contents.items()):
        (out / name).write_bytes(content)
        outputs[name] = hashlib.sha256(content).hexdigest()
    manifest = {
        'config': report.config.as_dict(),
        'config_hash': report.config_hash,
        'version': report.version,
        'wall_clock': report.wall_clock,
        'aggregates': report.aggregates,
        'outputs': outputs,
    }
    (out / MANIFEST).write_text(json.dumps(_jsonable(manifest), sort_keys=True, indent=2) + '\n')
    logger_for_report.info("Wrote manifest and %s outputs to %s.", len(outputs), out)
    return out / MANIFEST


def verify_report(out):
    """
    Re-read an output directory; returns ``(manifest, mismatched file names)``.
    """
    path = Path(out) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"No manifest at {str(path)!r}.") from None
    except ValueError as exc:
        raise ConfigError(f"Unreadable manifest {str(path)!r}: {exc}") from exc
    mismatched = []
    for name, digest in sorted(manifest.get('outputs', {}).items()):
        target = Path(out) / name
        if not target.exists() or hashlib.sha256(target.read_bytes()).hexdigest() != digest:
            mismatched.append(name)
    if ExperimentConfig.from_dict(manifest['config']).content_hash() != manifest.get('config_hash'):
        mismatched.append(MANIFEST)
    return manifest, mismatched


def boundary_function(kind, seed=0):
    """
    Boundary data ``f``: the affine map ``x ↦ Px``, a fixed trigonometric field or a seeded random trigonometric
    field.
    """
    if kind == AFFINE:
        return lambda points: points @ AFFINE_DATA.T
    if kind == TRIGONOMETRIC:
        return lambda points: np.stack(
            [np.sin(np.pi * points[:, 0] / 2) * np.cos(np.pi * points[:, 1] / 2), points[:, 0] * points[:, 1]], axis=1
        )
    if kind == RANDOM_TRIGONOMETRIC:
        generator = np.random.Generator(np.random.Philox(key=int(seed) & ((1 << 64) - 1)))
        amplitudes = generator.uniform(-1.0, 1.0, (2, 3))
        phases = generator.uniform(0.0, 2 * np.pi, (2, 3))
        frequencies = np.arange(1, 4) * np.pi / 4

        def random_trigonometric(points):
            angle = (points[:, 0:1] + 0.5 * points[:, 1:2]) * frequencies
            return np.stack([np.sum(amplitudes[a] * np.sin(angle + phases[a]), axis=1) for a in range(2)], axis=1)

        return random_trigonometric
    raise ValueError(f"Unknown boundary data kind {kind!r}.")


def _require(condition, message):
    if not condition:
        raise ConfigError(message)


def _field(config: ExperimentConfig, seed, epsilon, half_width):
    sampled = sample_field(config.model, seed, epsilon, required_cells(epsilon, half_width), half_width)
    return split_compressibility(sampled)


def _finish(config, started, tables, aggregates, artifacts=None):
    report = RunReport(config, config.content_hash(), tables, aggregates, time.perf_counter() - started, __version__, artifacts or {})
    logger_for_run.info("Finished %s run in %.3fs.", config.kind, report.wall_clock)
    return report


def _dyadic(config: ExperimentConfig, largest, smallest):
    if config.scales:
        return sorted((r for r in config.scales if smallest * (1 - 1e-12) <= r <= largest), reverse=True)
    scales = []
    r = largest
    while r >= smallest * (1 - 1e-12):
        scales.append(r)
        r /= 2
    return scales


def _quantiles(values):
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if not values.size:
        return {'median': None, 'q90': None, 'count': 0}
    return {'median': float(np.quantile(values, 0.5)), 'q90': float(np.quantile(values, 0.9)), 'count': int(values.size)}


def _good_scale(scales, ratios):
    """
    Empirical threshold scale of a descending ``scales`` ladder.

    Walks down from the largest scale and returns the last scale before the first ratio that exceeds ``PLATEAU_FACTOR``
    times the largest-scale ratio. Ratios that fall back under the threshold at smaller scales do not extend the range.
    """
    plateau = ratios[0]
    good = scales[0]
    for r, ratio in zip(scales, ratios):
        if ratio > PLATEAU_FACTOR * plateau:
            break
        good = r
    return good


def run_sample(config: ExperimentConfig):
    """Sample fields, check ellipticity and keep each realization as an HLAB1 artifact."""
    started = time.perf_counter()
    rows, artifacts = [], {}
    for seed in config.seeds:
        for index, epsilon in enumerate(config.epsilons):
            cells = required_cells(epsilon, config.half_width)
            field = sample_field(config.model, seed, epsilon, cells, config.half_width)
            report = verify_ellipticity(field)
            rows.append((seed, epsilon, cells, report.min_eig, report.max_eig, report.symmetric, report.lambda_min, report.lambda_max))
            artifacts[f"field_{seed}_{index}.hlab"] = field.to_bytes()
    table = Table(('seed', 'epsilon', 'cells', 'min_eig', 'max_eig', 'symmetric', 'lambda_min', 'lambda_max'), rows)
    aggregates = {'min_eig': min(row[3] for row in rows), 'max_eig': max(row[4] for row in rows)}
    return _finish(config, started, {'sample': table}, aggregates, artifacts)


def _pressure_oscillation(pressure):
    values = pressure.values
    return math.sqrt(float(np.mean((values - values.mean()) ** 2)))


def run_lambda_sweep(config: ExperimentConfig):
    """
    λ-uniform energy ratios ``(‖∇u‖ + ‖λ∇·u - mean‖) / ‖f‖_{H¹}`` across the λ ladder, and the λ⁻¹ rate of
    ``‖∇(u_λ - v₀)‖``.
    """
    epsilon = config.epsilons[0]
    h = epsilon / config.elements_per_cell
    _require(config.half_width >= 4 * h, f"half_width {config.half_width!r} needs at least 4 elements (h={h!r}).")
    started = time.perf_counter()
    mask = build_box_mask(h, (0.0, 0.0), config.half_width)
    rows, summary = [], []
    for seed in config.seeds:
        field = _field(config, seed, epsilon, config.half_width)
        f = boundary_function(config.boundary, seed)
        data = DiscreteVectorField.interpolate(mask, f)
        data_norm = math.sqrt(mean_square(data, mask.active_elements)) + math.sqrt(gradient_mean_square(data, mask.active_elements))
        ratios = []
        for value in config.lambdas:
            u = solve_elasticity_dirichlet(field.with_lambda0(value), value, mask, f, settings=config.settings)
            gradient = math.sqrt(gradient_mean_square(u, mask.active_elements))
            oscillation = _pressure_oscillation(filtered_pressure(u, value))
            ratio = (gradient + oscillation) / data_norm
            ratios.append(ratio)
            rows.append((seed, value, gradient, oscillation, data_norm, ratio))
        rate = lambda_rate(field, mask, f, None, [value for value in config.lambdas if value > 0], config.settings)
        summary.append((seed, max(ratios) / min(ratios), rate.slope))
    tables = {
        'solve': Table(('seed', 'lambda', 'gradient_norm', 'pressure_oscillation', 'data_norm', 'ratio'), rows),
        'solve_summary': Table(('seed', 'ratio_variation', 'lambda_rate_slope'), summary),
    }
    aggregates = {
        'max_ratio_variation': max(row[1] for row in summary),
        'lambda_rate_slope': _quantiles([row[2] for row in summary]),
    }
    return _finish(config, started, tables, aggregates)


def run_expansion(config: ExperimentConfig):
    """Expansion residuals against the direct penalized solve, per seed and λ."""
    epsilon = config.epsilons[0]
    _require(all(value > 0 for value in config.lambdas), "Expansion runs need positive lambdas.")
    started = time.perf_counter()
    mask = build_box_mask(epsilon / config.elements_per_cell, (0.0, 0.0), config.half_width)
    rows, summary = [], []
    for seed in config.seeds:
        field = _field(config, seed, epsilon, config.half_width)
        f = boundary_function(config.boundary, seed)
        for value in config.lambdas:
            result = expansion_solve(field.with_lambda0(value), mask, f, None, value, config.ell_max, config.settings)
            for ell, (gradient_error, pressure_error) in enumerate(result.residual_norms):
                rows.append((seed, value, ell, gradient_error, pressure_error))
            summary.append((seed, value, len(result.terms), result.ratio_estimate, result.diverged))
    tables = {
        'expansion': Table(('seed', 'lambda', 'ell', 'gradient_error', 'pressure_error'), rows),
        'expansion_summary': Table(('seed', 'lambda', 'terms', 'ratio_estimate', 'diverged'), summary),
    }
    aggregates = {'diverged': sum(1 for row in summary if row[4]), 'runs': len(summary)}
    return _finish(config, started, tables, aggregates)


def run_cell_quantities(config: ExperimentConfig):
    """One row of cell quantities per seed: μ, μ*, J for the first probe, the smallest J and μ_λ per λ."""
    m = config.levels[0]
    started = time.perf_counter()

    def one(seed):
        return subadditive_sample(config.model, seed, m, lambdas=config.lambdas, elements_per_cell=config.elements_per_cell, settings=config.settings)

    samples = map_seeds(one, config.seeds)
    rows = [
        (sample.seed, sample.level, sample.mu[0], sample.mu_star[0], sample.J[0], float(sample.J.min()), *sample.mu_lambda[0])
        for sample in samples
    ]
    columns = ('seed', 'level', 'mu', 'mu_star', 'J', 'min_J') + tuple(f"mu_lambda_{value:g}" for value in config.lambdas)
    aggregates = {'min_J': min(row[5] for row in rows), 'rows': len(rows)}
    return _finish(config, started, {'cell': Table(columns, rows)}, aggregates)


def _matrix_rows(level, provenance, value, estimate, interval):
    for p in range(4):
        for q in range(4):
            yield (level, provenance, value, p, q, estimate.matrix[p, q], interval.half_width[p, q])


def run_homogenize(config: ExperimentConfig):
    """``Â`` and ``Ā_λ`` per level with confidence half widths, and the fitted decay of ``|Ā_λ - Â|`` in λ."""
    _require(config.samples >= 2, "Homogenization estimates need at least 2 samples.")
    started = time.perf_counter()
    rows, document, aggregates = [], {}, {}
    for m in config.levels:
        a_hat, hat_interval = estimate_A_hat(config.model, m, config.samples, config.seed, config.elements_per_cell, config.settings)
        rows.extend(_matrix_rows(m, a_hat.provenance, math.nan, a_hat, hat_interval))
        entry = {'A_hat': {**a_hat.as_dict(), **hat_interval.as_dict()}, 'A_bar_lambda': []}
        distances = []
        for value in config.lambdas:
            a_bar, bar_interval = estimate_A_bar_lambda(
                config.model, m, value, config.samples, config.seed, config.elements_per_cell, config.settings
            )
            rows.extend(_matrix_rows(m, a_bar.provenance, value, a_bar, bar_interval))
            entry['A_bar_lambda'].append({'lambda': value, **a_bar.as_dict(), **bar_interval.as_dict()})
            distances.append(float(np.linalg.norm(a_bar.matrix - a_hat.matrix)))
        positive = [(value, distance) for value, distance in zip(config.lambdas, distances) if value > 0]
        slope, ci = fit_slope([value for value, _ in positive], [distance for _, distance in positive])
        entry['distance'] = distances
        document[str(m)] = entry
        aggregates[f"level_{m}"] = {'distance_slope': slope, 'distance_slope_ci': ci, 'eigenvalues': a_hat.eigenvalues()}
    table = Table(('level', 'provenance', 'lambda', 'p', 'q', 'value', 'half_width'), rows)
    artifact = json.dumps(_jsonable(document), sort_keys=True, indent=2).encode()
    return _finish(config, started, {'homogenize': table}, aggregates, {'homogenize.json': artifact})


def run_corrector_rate(config: ExperimentConfig):
    """Finite-volume corrector errors per level, with ``Â`` estimated at the largest level."""
    _require(config.samples >= 2, "Corrector runs need at least 2 samples.")
    started = time.perf_counter()
    a_hat, _ = estimate_A_hat(config.model, max(config.levels), config.samples, config.seed, config.elements_per_cell, config.settings)
    rows = []
    aggregates = {}
    for n in sorted(config.levels):

        def one(seed):
            field = split_compressibility(cube_field(config.model, seed, n))
            return finite_volume_corrector(field, n, (1, 0), a_hat, seed, config.elements_per_cell, config.settings)

        samples = map_seeds(one, config.seeds)
        rows.extend((sample.seed, n, sample.flux_error, sample.displacement_error, sample.pressure_error) for sample in samples)
        flux = np.array([sample.flux_error for sample in samples])
        aggregates[f"level_{n}"] = {'flux_error_mean': float(flux.mean()), 'flux_error_std': float(flux.std(ddof=1))}
    table = Table(('seed', 'level', 'flux_error', 'displacement_error', 'pressure_error'), rows)
    return _finish(config, started, {'corrector': table}, aggregates)


def run_homogenization_rate(config: ExperimentConfig):
    """Homogenization errors over the ε ladder at the first λ."""
    _require(config.samples >= 2, "Rate runs need at least 2 samples.")
    started = time.perf_counter()
    value = config.lambdas[0]
    table = homogenization_rate_experiment(
        config.model,
        boundary_function(config.boundary, config.seed),
        config.epsilons,
        value,
        config.samples,
        config.seed,
        half_width=config.half_width,
        cell_level=config.levels[0],
        elements_per_cell=config.elements_per_cell,
        settings=config.settings,
    )
    aggregates = {
        'lambda': value,
        'l2_slope': table.l2_slope,
        'l2_slope_ci': table.l2_slope_ci,
        'hminus1_slope': table.hminus1_slope,
        'hminus1_slope_ci': table.hminus1_slope_ci,
    }
    return _finish(config, started, {'rate': Table(table.COLUMNS, list(table.rows()))}, aggregates)


def _ball_statistics(u, pressure, elements, reference_pressure):
    gradient = math.sqrt(gradient_mean_square(u, elements))
    values = pressure.on_grid()[elements]
    return gradient, math.sqrt(float(np.mean((values - reference_pressure) ** 2)))


def run_interior_lipschitz(config: ExperimentConfig):
    """
    Normalized ``(⨏_{B_r}|∇u|²)^{1/2}`` and pressure oscillation on ``B_r`` for solutions on ``B₂``, per seed and ε.
    """
    value = config.lambdas[0]
    radius = 2.0
    started = time.perf_counter()
    rows, summary, aggregates = [], [], {}
    for epsilon in config.epsilons:
        h = epsilon / config.elements_per_cell
        mask = build_ball_mask(h, (0.0, 0.0), radius)
        scales = _dyadic(config, 1.0, 4 * epsilon)
        _require(scales, f"No scale in [4ε, 1] for epsilon={epsilon!r}.")
        maxima = []
        for seed in config.seeds:
            field = _field(config, seed, epsilon, radius + h).with_lambda0(value)
            u = solve_elasticity_dirichlet(field, value, mask, boundary_function(config.boundary, seed), settings=config.settings)
            pressure = filtered_pressure(u, value)
            normalization = math.sqrt(gradient_mean_square(u, mask.active_elements))
            mean_pressure = pressure.mean()
            ratios = []
            for r in scales:
                elements = mask.elements_within((0.0, 0.0), r)
                gradient, oscillation = _ball_statistics(u, pressure, elements, mean_pressure)
                ratio = (gradient + oscillation) / normalization
                caccioppoli = math.nan
                if 2 * r <= 1.0 and r >= 8 * h:
                    caccioppoli = caccioppoli_residual(u, pressure, (0.0, 0.0), r)
                ratios.append(ratio)
                rows.append((seed, epsilon, r, gradient / normalization, oscillation / normalization, ratio, caccioppoli))
            maxima.append(max(ratios))
            summary.append((seed, epsilon, max(ratios), _good_scale(scales, ratios)))
        aggregates[f"epsilon_{epsilon:g}"] = _quantiles(maxima)
    tables = {
        'interior': Table(('seed', 'epsilon', 'r', 'lhs_gradient', 'lhs_pressure', 'ratio', 'caccioppoli'), rows),
        'interior_summary': Table(('seed', 'epsilon', 'max_ratio', 'good_scale'), summary),
    }
    return _finish(config, started, tables, aggregates)


def boundary_data(boundary):
    """``(x₂ - ψ(x₁))₊ q``: zero on the graph."""

    def data(points):
        heights = np.maximum(points[:, 1] - boundary(points[:, 0]), 0.0)
        return heights[:, None] * BOUNDARY_DIRECTION

    return data


def cap_perturbation(u, field, value, domain, t, settings=None):
    """
    Gradient distance between the zero extension of ``u`` and the solution on ``T_t^+`` with the same data,
    normalized by ``(⨏_D|∇u|²)^{1/2}``.
    """
    _, plus = cap_domains(domain, t)
    extension = solve_elasticity_dirichlet(field, value, plus, u.values, settings=settings)
    difference = (extension.values - u.values).ravel()
    laplacian = vector_laplacian(plus)
    distance = math.sqrt(max(float(difference @ (laplacian @ difference)), 0.0) / plus.area)
    return distance / math.sqrt(gradient_mean_square(u, u.mask.active_elements))


def run_boundary_lipschitz(config: ExperimentConfig):
    """
    Boundary analog on bumpy domains, with the boundary excess ladder and the cap-perturbation diagnostic.
    """
    value = config.lambdas[0]
    started = time.perf_counter()
    rows, summary, aggregates = [], [], {}
    zetas, perturbations = [], []
    for epsilon in config.epsilons:
        h = epsilon / config.elements_per_cell
        _require(h <= epsilon / 4, f"elements_per_cell={config.elements_per_cell} does not resolve the bumps (needs ≥ 4).")
        maxima = []
        for seed in config.seeds:
            params = config.domain.params(epsilon, seed)
            domain = build_bumpy_domain(params, h)
            scales = _dyadic(config, params.r0, 4 * epsilon)
            _require(scales, f"No scale in [4ε, r0] for epsilon={epsilon!r}.")
            field = _field(config, seed, epsilon, params.radius + h).with_lambda0(value)
            u = solve_elasticity_dirichlet(field, value, domain.mask, boundary_data(domain.boundary), settings=config.settings)
            pressure = filtered_pressure(u, value)
            mask = domain.mask
            normalization = math.sqrt(gradient_mean_square(u, mask.active_elements))
            mean_pressure = pressure.mean()
            ratios = []
            for r in scales:
                elements = mask.elements_within((0.0, 0.0), r, mask.inside_elements)
                gradient, oscillation = _ball_statistics(u, pressure, elements, mean_pressure)
                ratio = (gradient + oscillation) / normalization
                ratios.append(ratio)
                phi = h_excess = perturbation = math.nan
                if r > epsilon and r >= 8 * h:
                    excess = boundary_excess(u, pressure, domain, r)
                    phi, h_excess = excess.phi, excess.h_excess
                if epsilon < 2 * r <= params.r0:
                    try:
                        perturbation = cap_perturbation(u, field, value, domain, 2 * r, config.settings)
                        zetas.append(zeta(2 * r, epsilon, params.alpha))
                        perturbations.append(perturbation)
                    except (GeometryError, UnderResolved) as exc:
                        logger_for_run.warning("No cap diagnostic at r=%r: %s", r, exc)
                rows.append((seed, epsilon, r, gradient / normalization, oscillation / normalization, ratio, phi, h_excess, perturbation))
            maxima.append(max(ratios))
            summary.append((seed, epsilon, max(ratios), _good_scale(scales, ratios), sandwich_constant(domain), normal_drift(domain)))
        aggregates[f"epsilon_{epsilon:g}"] = _quantiles(maxima)
    gamma, gamma_ci = fit_slope(zetas, perturbations)
    aggregates['perturbation_exponent'] = {'gamma': gamma, 'ci': gamma_ci, 'pairs': len(zetas)}
    tables = {
        'boundary': Table(
            ('seed', 'epsilon', 'r', 'lhs_gradient', 'lhs_pressure', 'ratio', 'phi', 'h_excess', 'perturbation'), rows
        ),
        'boundary_summary': Table(('seed', 'epsilon', 'max_ratio', 'good_scale', 'sandwich_constant', 'normal_drift'), summary),
    }
    return _finish(config, started, tables, aggregates)


def decay_budget(r, epsilon, h_r, alpha=0.5, gamma=DEFAULT_BUDGET_EXPONENT, constant=0.0):
    """
    Budget terms allowed above ``½H(r)``: the boundary-regularity term ``C ζ_α(r, ε)^γ H(r)`` and the
    homogenization proxy ``(ε/r)^{1/2} H(r)``. A pair decays within budget when ``H(θr)`` is at most ``½H(r)`` plus
    both terms plus ``DECAY_TOLERANCE``.
    """
    return constant * zeta(r, epsilon, alpha) ** gamma * h_r, math.sqrt(epsilon / r) * h_r


def fit_budget(zetas, excesses, gamma=None):
    """
    Fit ``excess ≈ C ζ^γ`` over the pairs with a positive relative excess ``(H(θr) - ½H(r)) / H(r)``.

    :param gamma: fixed exponent; fitted as a log-log slope when ``None``.
    :return: ``(γ, C, fitted)``, with ``C = 0`` when every pair decays.
    """
    zetas = np.asarray(zetas, dtype=float)
    excesses = np.asarray(excesses, dtype=float)
    positive = excesses > 0
    if not positive.any():
        return (DEFAULT_BUDGET_EXPONENT if gamma is None else gamma), 0.0, False
    fitted = gamma is None
    if fitted:
        gamma, _ = fit_slope(zetas[positive], excesses[positive])
        if not gamma > 0:
            logger_for_run.warning("Budget exponent fit gave %r, using %r.", gamma, DEFAULT_BUDGET_EXPONENT)
            gamma, fitted = DEFAULT_BUDGET_EXPONENT, False
    constant = math.exp(float(np.mean(np.log(excesses[positive]) - gamma * np.log(zetas[positive]))))
    return gamma, constant, fitted


def _decay_ladders(config: ExperimentConfig, epsilon, h):
    if config.decay.geometry == BUMPY:
        r0 = config.domain.params(epsilon, config.seed).r0
        return {
            theta: [r for r in _dyadic(config, r0, max(8 * h, epsilon) / theta) if theta * r > epsilon * (1 + 1e-12)]
            for theta in config.thetas
        }
    return {theta: _dyadic(config, 1.0, 8 * h / theta) for theta in config.thetas}


def run_excess_decay(config: ExperimentConfig):
    """
    ``H(θr) - ½H(r)`` for every θ and every ``r`` with ``θr ≥ 8h``, on ``B₂`` solutions (interior excess) or on
    bumpy-domain solutions (boundary excess, ``ε < θr`` and ``r ≤ r₀``), with the fitted error budget per pair.
    """
    value = config.lambdas[0]
    epsilon = config.epsilons[0]
    h = epsilon / config.elements_per_cell
    bumpy = config.decay.geometry == BUMPY
    if bumpy:
        _require(h <= epsilon / 4, f"elements_per_cell={config.elements_per_cell} does not resolve the bumps (needs ≥ 4).")
    ladders = _decay_ladders(config, epsilon, h)
    _require(any(ladders.values()), f"No scale with θr ≥ 8h at h={h!r}.")
    started = time.perf_counter()
    radius = 2.0
    mask = None if bumpy else build_ball_mask(h, (0.0, 0.0), radius)
    pairs = []
    for seed in config.seeds:
        if bumpy:
            domain = build_bumpy_domain(config.domain.params(epsilon, seed), h)
            field = _field(config, seed, epsilon, config.domain.radius + h).with_lambda0(value)
            u = solve_elasticity_dirichlet(field, value, domain.mask, boundary_data(domain.boundary), settings=config.settings)
            pressure = filtered_pressure(u, value)

            def excess(t):
                return boundary_excess(u, pressure, domain, t).h_excess

        else:
            field = _field(config, seed, epsilon, radius + h).with_lambda0(value)
            u = solve_elasticity_dirichlet(field, value, mask, boundary_function(config.boundary, seed), settings=config.settings)
            pressure = filtered_pressure(u, value)

            def excess(t):
                return interior_excess(u, pressure, (0.0, 0.0), t).h_excess

        for theta, scales in ladders.items():
            for r in scales:
                pairs.append((seed, theta, r, excess(r), excess(theta * r)))
    alpha = config.domain.alpha
    measured = [(zeta(r, epsilon, alpha), (inner - 0.5 * outer) / outer) for _, _, r, outer, inner in pairs if outer > 0]
    gamma, constant, fitted = fit_budget([item[0] for item in measured], [item[1] for item in measured], config.decay.gamma)
    rows = []
    for seed, theta, r, outer, inner in pairs:
        zeta_term, proxy_term = decay_budget(r, epsilon, outer, alpha, gamma, constant)
        budget = zeta_term + proxy_term + DECAY_TOLERANCE
        rows.append(
            (
                seed,
                theta,
                r,
                outer,
                inner,
                inner - 0.5 * outer,
                inner <= 0.5 * outer + DECAY_TOLERANCE,
                zeta(r, epsilon, alpha),
                zeta_term,
                proxy_term,
                budget,
                inner <= 0.5 * outer + budget,
            )
        )
    columns = (
        'seed', 'theta', 'r', 'h_r', 'h_theta_r', 'decay', 'decays', 'zeta', 'zeta_term', 'proxy_term', 'budget', 'decays_with_budget'
    )
    aggregates = {
        'geometry': config.decay.geometry,
        'decay_fraction': sum(1 for row in rows if row[6]) / len(rows),
        'budget_fraction': sum(1 for row in rows if row[11]) / len(rows),
        'budget': {'gamma': gamma, 'constant': constant, 'fitted': fitted},
        'pairs': len(rows),
    }
    return _finish(config, started, {'excess': Table(columns, rows)}, aggregates)


RUNS = {
    'sample': run_sample,
    'lambda-sweep': run_lambda_sweep,
    'expansion': run_expansion,
    'cell-quantities': run_cell_quantities,
    'homogenize': run_homogenize,
    'homog-rate': run_homogenization_rate,
    'corrector-rate': run_corrector_rate,
    'interior-lipschitz': run_interior_lipschitz,
    'boundary-lipschitz': run_boundary_lipschitz,
    'excess-decay': run_excess_decay,
}


def run(config: ExperimentConfig):
    logger_for_run.info("Running %s experiment (hash %s) over seeds %s..%s ...", config.kind, config.content_hash(), config.seed, config.seed + config.samples - 1)
    return RUNS[config.kind](config)
