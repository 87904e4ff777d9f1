import math

import numpy as np
import pytest

from homogenlab import NotQuadratic
from homogenlab.coeff import CONSTANT
from homogenlab.coeff import CoefficientField
from homogenlab.coeff import RandomFieldModel
from homogenlab.geometry import build_cube_mask
from homogenlab.homog import A_D
from homogenlab.homog import A_HAT
from homogenlab.homog import J
from homogenlab.homog import TRACELESS_BASIS
from homogenlab.homog import QuadraticFormMatrix
from homogenlab.homog import cube_field
from homogenlab.homog import dirichlet_matrix
from homogenlab.homog import dual_matrix
from homogenlab.homog import estimate_A_bar_lambda
from homogenlab.homog import estimate_A_hat
from homogenlab.homog import finite_volume_corrector
from homogenlab.homog import fit_slope
from homogenlab.homog import homogenization_rate_experiment
from homogenlab.homog import lambda_matrix
from homogenlab.homog import map_seeds
from homogenlab.homog import mu
from homogenlab.homog import mu_lambda
from homogenlab.homog import mu_star
from homogenlab.homog import neumann_matrix
from homogenlab.homog import probe_matrices
from homogenlab.homog import quadratic_response
from homogenlab.homog import random_probes
from homogenlab.homog import recover_quadratic_matrix
from homogenlab.homog import subadditive_sample
from homogenlab.homog import subadditivity_slack
from homogenlab.solve import DirichletCellProblem

TRACELESS = np.array([[0.5, 1.0], [-0.25, -0.5]])
PROJECTOR = TRACELESS_BASIS @ TRACELESS_BASIS.T


@pytest.fixture
def constant_model():
    return RandomFieldModel(CONSTANT, contrast=1.0)


@pytest.fixture
def identity_cell_field():
    return CoefficientField.uniform(np.eye(4), 0.0, 0.5)


def boundary_data(points):
    return np.column_stack([np.sin(np.pi * points[:, 0]), points[:, 0] * points[:, 1]])


def test_probe_matrices():
    probes = probe_matrices()
    assert len(probes) == 16
    assert probes[4].ravel().tolist() == [1.0, 1.0, 0.0, 0.0]
    assert probes[15].ravel().tolist() == [0.0, 0.0, 1.0, -1.0]


def test_recover_quadratic_matrix():
    generator = np.random.default_rng(5)
    root = generator.standard_normal((4, 4))
    matrix = root @ root.T
    energies = [0.5 * P.ravel() @ matrix @ P.ravel() for P in probe_matrices()]
    recovered = recover_quadratic_matrix(energies)
    assert np.allclose(recovered.matrix, matrix)
    assert recovered.provenance == A_D
    assert recovered.energy(TRACELESS) == pytest.approx(0.5 * TRACELESS.ravel() @ matrix @ TRACELESS.ravel())


def test_recover_rejects_non_quadratic():
    energies = [abs(P).sum() ** 2 for P in probe_matrices()]
    with pytest.raises(NotQuadratic):
        recover_quadratic_matrix(energies)
    with pytest.raises(ValueError):
        recover_quadratic_matrix(energies[:10])


def test_quadratic_form_validation():
    with pytest.raises(ValueError):
        QuadraticFormMatrix(np.eye(4), 'A_tilde')
    with pytest.raises(ValueError):
        QuadraticFormMatrix(np.eye(3), A_D)
    with pytest.raises(ValueError):
        QuadraticFormMatrix(np.triu(np.ones((4, 4))), A_D)
    form = QuadraticFormMatrix(2 * np.eye(4), A_HAT)
    assert form.within(1.0, 2.0)
    assert not form.within(0.5, 1.5)
    assert form.as_dict()['eigenvalues'] == [2.0, 2.0, 2.0, 2.0]
    assert 'A_hat' in repr(form)


def test_dual_of_projector():
    star = QuadraticFormMatrix(PROJECTOR, 'A_*D', TRACELESS_BASIS)
    dual = dual_matrix(star)
    assert np.allclose(dual.matrix, PROJECTOR)
    assert dual.eigenvalues().tolist() == pytest.approx([1.0, 1.0, 1.0])


def test_traceless_basis_is_orthonormal():
    assert np.allclose(TRACELESS_BASIS.T @ TRACELESS_BASIS, np.eye(3))
    assert np.allclose(TRACELESS_BASIS[0] + TRACELESS_BASIS[3], 0.0)


def test_cell_quantities_of_identity(identity_cell_field):
    assert mu(identity_cell_field, 0, TRACELESS, elements_per_cell=4) == pytest.approx(0.5 * np.sum(TRACELESS**2))
    assert mu_star(identity_cell_field, 0, TRACELESS, elements_per_cell=4) == pytest.approx(0.5 * np.sum(TRACELESS**2))
    assert J(identity_cell_field, 0, TRACELESS, TRACELESS, elements_per_cell=4) == pytest.approx(0.0, abs=1e-10)
    assert mu_lambda(identity_cell_field, 0, np.eye(2), 3.0, elements_per_cell=4) == pytest.approx(1.0 + 6.0)


def test_J_is_nonnegative(two_phase_model):
    field = cube_field(two_phase_model, 3, 0)
    for P, Q in random_probes(3):
        assert J(field, 0, P, Q, elements_per_cell=4) >= -1e-10


def test_matrices_of_identity(identity_cell_field):
    assert np.allclose(dirichlet_matrix(identity_cell_field, 0, 4).matrix, np.eye(4))
    assert np.allclose(lambda_matrix(identity_cell_field, 0, 3.0, 4).matrix, np.eye(4))
    assert np.allclose(neumann_matrix(identity_cell_field, 0, 4).matrix, PROJECTOR)


def test_subadditivity(constant_model, two_phase_model):
    constant = cube_field(constant_model, 0, 1)
    assert subadditivity_slack(constant, 0, TRACELESS, elements_per_cell=4) == pytest.approx(0.0, abs=1e-10)
    field = cube_field(two_phase_model, 6, 1)
    assert subadditivity_slack(field, 0, TRACELESS, elements_per_cell=4) <= 1e-10
    assert subadditivity_slack(field, 0, np.eye(2), elements_per_cell=4, lambda0=2.0) <= 1e-10
    with pytest.raises(ValueError):
        subadditivity_slack(cube_field(two_phase_model, 6, 0), 0, TRACELESS)


@pytest.mark.parametrize('constrained', [True, False])
def test_quadratic_response(two_phase_model, constrained):
    field = cube_field(two_phase_model, 2, 0)
    problem = DirichletCellProblem(field, build_cube_mask(0, 4), constrained, 0.0 if constrained else 1.5)
    response = quadratic_response(problem, TRACELESS, np.random.default_rng(0))
    assert response.holds
    assert response.lower > 0


def test_estimates_of_constant_model(constant_model):
    estimate, interval = estimate_A_hat(constant_model, 0, 2, 10, elements_per_cell=4)
    assert estimate.provenance == A_HAT
    assert np.allclose(estimate.matrix, np.eye(4))
    assert np.allclose(interval.half_width, 0.0)
    assert interval.seeds == (10, 11)
    assert interval.as_dict()['n_samples'] == 2
    bar, _ = estimate_A_bar_lambda(constant_model, 0, 5.0, 2, 10, elements_per_cell=4)
    assert np.allclose(bar.matrix, np.eye(4))
    with pytest.raises(ValueError):
        estimate_A_hat(constant_model, 0, 1, 0)
    with pytest.raises(ValueError):
        estimate_A_bar_lambda(constant_model, 0, -1.0, 2, 0)


def test_estimate_bracket(two_phase_model):
    estimate, interval = estimate_A_hat(two_phase_model, 0, 3, 0, elements_per_cell=4)
    bound = two_phase_model.big_lambda
    assert estimate.within(1 / bound, bound)
    assert interval.samples.shape == (3, 4, 4)
    assert np.all(interval.half_width >= 0)


def test_corrector_of_constant_field(constant_model):
    field = cube_field(constant_model, 0, 1)
    sample = finite_volume_corrector(field, 1, (0, 1), np.eye(4), seed=0, elements_per_cell=4)
    assert sample.level == 1
    assert sample.direction == (0, 1)
    assert np.abs(sample.corrector.values).max() < 1e-10
    assert sample.flux_error == pytest.approx(0.0, abs=1e-10)
    assert sample.displacement_error == pytest.approx(0.0, abs=1e-10)
    assert sample.constraint_residual < 1e-10
    with pytest.raises(ValueError):
        finite_volume_corrector(field, 1, (2, 0), np.eye(4))


def test_corrector_of_random_field(two_phase_model):
    field = cube_field(two_phase_model, 4, 1)
    a_hat, _ = estimate_A_hat(two_phase_model, 1, 2, 0, elements_per_cell=4)
    sample = finite_volume_corrector(field, 1, (1, 0), a_hat, seed=4, elements_per_cell=4)
    corrector = sample.corrector
    assert not corrector.values[corrector.mask.dirichlet_nodes].any()
    assert sample.displacement_error > 0
    assert sample.constraint_residual < 1e-8


def test_fit_slope():
    scales = np.array([0.5, 0.25, 0.125])
    slope, ci = fit_slope(scales, 3 * scales**0.5)
    assert slope == pytest.approx(0.5)
    assert ci == pytest.approx(0.0, abs=1e-10)
    slope, ci = fit_slope(scales[:2], scales[:2] ** 2)
    assert slope == pytest.approx(2.0)
    assert math.isnan(ci)
    assert all(math.isnan(value) for value in fit_slope(scales, [1.0, 0.0, 1.0]))
    assert all(math.isnan(value) for value in fit_slope([0.5, 0.5], [1.0, 2.0]))
    assert all(math.isnan(value) for value in fit_slope([0.0, 10.0, 100.0], [1.0, 0.5, 0.25]))


def test_map_seeds_keeps_order(monkeypatch):
    monkeypatch.setenv('HOMOGENLAB_THREADS', '3')
    assert map_seeds(lambda seed: seed * seed, range(6)) == [0, 1, 4, 9, 16, 25]
    monkeypatch.setenv('HOMOGENLAB_THREADS', 'many')
    with pytest.raises(ValueError):
        map_seeds(abs, [1, 2])


def test_random_probes_are_traceless():
    probes = random_probes(7)
    assert len(probes) == 3
    for P, Q in probes:
        assert np.trace(P) == pytest.approx(0.0, abs=1e-14)
        assert np.trace(Q) == pytest.approx(0.0, abs=1e-14)
    assert np.array_equal(random_probes(7)[0][0], probes[0][0])


def test_subadditive_sample_of_constant_model(constant_model):
    P = TRACELESS
    Q = np.array([[0.0, 1.0], [0.0, 0.0]])
    sample = subadditive_sample(constant_model, 0, 0, probes=[(P, Q)], lambdas=(2.0,), elements_per_cell=4)
    assert sample.mu[0] == pytest.approx(0.5 * np.sum(P**2))
    assert sample.mu_star[0] == pytest.approx(0.5)
    assert sample.J[0] == pytest.approx(0.5 * np.sum((P - Q) ** 2))
    assert sample.mu_lambda.shape == (1, 1)
    assert sample.mu_lambda[0, 0] == pytest.approx(0.5 * np.sum(P**2))


def test_rate_experiment_with_exact_coefficients(constant_model):
    table = homogenization_rate_experiment(
        constant_model, boundary_data, (0.25, 0.5), 1.0, 2, 0, a_bar=np.eye(4), elements_per_cell=4
    )
    assert table.epsilons.tolist() == [0.5, 0.25]
    assert np.all(table.l2_error_mean < 1e-10)
    assert math.isnan(table.l2_slope)
    rows = list(table.rows())
    assert len(rows) == 2
    assert len(rows[0]) == len(table.COLUMNS)


def test_rate_experiment(two_phase_model):
    table = homogenization_rate_experiment(
        two_phase_model, boundary_data, (0.5, 0.25, 0.125), 1.0, 2, 0, cell_level=0, elements_per_cell=4
    )
    assert np.all(table.l2_error_mean > 0)
    assert np.all(table.hminus1_error_mean > 0)
    assert np.all(table.l2_error_std >= 0)
    assert math.isfinite(table.l2_slope)
    assert table.n_samples == 2
