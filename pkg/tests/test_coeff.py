import numpy as np
import pytest

from homogenlab.coeff import CONSTANT
from homogenlab.coeff import IID_TENSOR
from homogenlab.coeff import TRACE_BLOCK
from homogenlab.coeff import TWO_PHASE
from homogenlab.coeff import CoefficientField
from homogenlab.coeff import RandomFieldModel
from homogenlab.coeff import read_field
from homogenlab.coeff import required_cells
from homogenlab.coeff import sample_field
from homogenlab.coeff import split_compressibility
from homogenlab.coeff import verify_ellipticity
from homogenlab.coeff import write_field


@pytest.fixture
def two_phase():
    return RandomFieldModel(TWO_PHASE, contrast=4.0, lambda0=1.0, lambda_band=1.0, big_lambda=2.0)


def test_same_seed_same_field(two_phase):
    first = sample_field(two_phase, 7, 0.25, 8, 1.0)
    second = sample_field(two_phase, 7, 0.25, 8, 1.0)
    assert np.array_equal(first.tensor_values, second.tensor_values)
    assert np.array_equal(first.lambda_values, second.lambda_values)


def test_different_seed_different_field(two_phase):
    first = sample_field(two_phase, 7, 0.25, 8, 1.0)
    second = sample_field(two_phase, 8, 0.25, 8, 1.0)
    assert not np.array_equal(first.lambda_values, second.lambda_values)


def test_cell_values_depend_on_cell_only(two_phase):
    field = sample_field(two_phase, 3, 0.5, 4, 1.0)
    window = field.window((1, 2), 2)
    tensors = field.tensor_values.reshape(4, 4, 4, 4)
    assert np.array_equal(window.tensor_values.reshape(2, 2, 4, 4), tensors[2:4, 1:3])
    assert window.cells_per_side == 2
    assert window.half_width == 0.5


def test_two_phase_values(two_phase):
    field = sample_field(two_phase, 11, 0.125, 16, 1.0)
    scales = field.tensor_values[:, 0, 0]
    assert set(np.round(scales, 12)) <= {0.5, 2.0}
    assert np.all(field.tensor_values == scales[:, None, None] * np.eye(4))
    stiff = scales == 2.0
    assert np.all(field.lambda_values[stiff] == 2.0)
    assert np.all(field.lambda_values[~stiff] == 1.0)


def test_two_phase_statistics(two_phase_model):
    cells = 100
    field = sample_field(two_phase_model, 2024, 2.0 / cells, cells, 1.0)
    stiff = (field.tensor_values[:, 0, 0] > 1).astype(float)
    count = stiff.size
    assert abs(stiff.mean() - 0.5) <= 3 * 0.5 / np.sqrt(count)
    grid = stiff.reshape(cells, cells)
    for first, second in ((grid[:, :-1], grid[:, 1:]), (grid[:-1, :], grid[1:, :])):
        correlation = np.corrcoef(first.ravel(), second.ravel())[0, 1]
        assert abs(correlation) < 3 / np.sqrt(first.size)


def test_iid_tensor_ellipticity():
    model = RandomFieldModel(IID_TENSOR, contrast=4.0, big_lambda=2.0, lambda_band=0.5)
    report = verify_ellipticity(sample_field(model, 5, 0.25, 8, 1.0))
    assert report.symmetric
    assert report.min_eig >= 0.5 - 1e-9
    assert report.max_eig <= 2.0 + 1e-9
    assert 0 <= report.lambda_min <= report.lambda_max <= 0.5


def test_constant_model_base_tensor():
    base = np.diag([1.0, 1.5, 1.5, 1.0])
    model = RandomFieldModel(CONSTANT, contrast=1.0, lambda0=3.0, base_tensor=tuple(base.ravel()))
    field = sample_field(model, 0, 1.0, 2, 1.0)
    assert np.array_equal(field.tensor_values, np.broadcast_to(base, (4, 4, 4)))
    assert np.all(field.lambda_values == 3.0)


@pytest.mark.parametrize(
    'options',
    [
        {'model_kind': 'lognormal'},
        {'contrast': 9.0, 'big_lambda': 2.0},
        {'contrast': 0.5},
        {'lambda_band': 3.0, 'big_lambda': 2.0},
        {'lambda0': -1.0},
        {'big_lambda': 0.5},
        {'model_kind': CONSTANT, 'base_tensor': (1.0, 2.0)},
        {'model_kind': CONSTANT, 'big_lambda': 2.0, 'base_tensor': tuple((4 * np.eye(4)).ravel())},
    ],
)
def test_invalid_model(options):
    with pytest.raises(ValueError):
        RandomFieldModel(**options)


def test_lattice_must_cover(two_phase):
    assert required_cells(0.25, 1.0) == 8
    with pytest.raises(ValueError):
        sample_field(two_phase, 0, 0.25, 7, 1.0)
    with pytest.raises(ValueError):
        sample_field(two_phase, 0, 0.0, 8, 1.0)


def test_split_preserves_energy(two_phase):
    field = sample_field(two_phase, 2, 0.25, 8, 1.0)
    split = split_compressibility(field)
    assert np.all(split.lambda_values == split.lambda0)
    assert split.lambda0 == field.lambda_values.min()
    gradients = np.random.default_rng(0).standard_normal((field.lambda_values.size, 4))
    trace = gradients[:, 0] + gradients[:, 3]
    original = np.einsum('ci,cij,cj->c', gradients, field.tensor_values, gradients) + field.lambda_values * trace**2
    absorbed = np.einsum('ci,cij,cj->c', gradients, split.tensor_values, gradients) + split.lambda_values * trace**2
    assert np.allclose(original, absorbed)


def test_split_is_idempotent(two_phase):
    once = split_compressibility(sample_field(two_phase, 4, 0.5, 4, 1.0))
    twice = split_compressibility(once)
    assert np.array_equal(once.tensor_values, twice.tensor_values)
    assert np.array_equal(once.lambda_values, twice.lambda_values)


def test_trace_block():
    gradient = np.array([1.0, 2.0, 3.0, 4.0])
    assert gradient @ TRACE_BLOCK @ gradient == 25.0


def test_with_lambda0_keeps_variable_part(two_phase):
    field = sample_field(two_phase, 1, 0.5, 4, 1.0)
    shifted = field.with_lambda0(10.0)
    assert np.allclose(shifted.variable_lambda, field.variable_lambda)
    assert shifted.lambda0 == 10.0
    with pytest.raises(ValueError):
        field.with_lambda0(-1.0)


def test_effective_tensors(two_phase):
    field = sample_field(two_phase, 1, 0.5, 4, 1.0)
    points = np.array([[-0.9, -0.9], [0.1, 0.6]])
    cells = field.cell_of(points)
    assert cells.tolist() == [0, 14]
    expected = field.tensor_values[cells] + field.variable_lambda[cells][:, None, None] * TRACE_BLOCK
    assert np.array_equal(field.effective_tensors(points), expected)
    with pytest.raises(ValueError):
        field.cell_of([[5.0, 0.0]])


def test_as_rank4_layout():
    tensor = np.arange(16.0).reshape(4, 4)
    tensor = tensor + tensor.T
    a = CoefficientField.uniform(tensor).as_rank4()
    for i in range(2):
        for j in range(2):
            for alpha in range(2):
                for beta in range(2):
                    assert a[0, i, j, alpha, beta] == tensor[2 * alpha + i, 2 * beta + j]


def test_field_file(tmp_path, two_phase):
    field = sample_field(two_phase, 9, 0.5, 4, 1.0)
    path = write_field(tmp_path / 'field.hlab', field)
    assert path.read_bytes()[:5] == b'HLAB1'
    loaded = read_field(path)
    assert np.array_equal(loaded.tensor_values, field.tensor_values)
    assert np.array_equal(loaded.lambda_values, field.lambda_values)
    assert (loaded.epsilon, loaded.lambda0, loaded.cells_per_side) == (0.5, 1.0, 4)


def test_corrupt_field_file(tmp_path, two_phase):
    data = sample_field(two_phase, 9, 0.5, 4, 1.0).to_bytes()
    with pytest.raises(ValueError, match='magic'):
        CoefficientField.from_bytes(b'XXXXX' + data[5:])
    with pytest.raises(ValueError):
        CoefficientField.from_bytes(data[:-8])
    with pytest.raises(ValueError):
        CoefficientField.from_bytes(data[:10])
