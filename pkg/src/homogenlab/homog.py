"""
Subadditive cell quantities, their quadratic forms and Monte Carlo estimates of the homogenized matrices.

Cell problems run on the triadic cube ``□_m = (-3^m/2, 3^m/2)²`` with unit cells (``ε = 1``) resolved by
``elements_per_cell`` elements each. A matrix ``P`` acts on flattened indices ``2β + j``.
"""
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from logging import getLogger
from typing import NamedTuple
from typing import Optional
from typing import Tuple

import numpy as np
from scipy.stats import linregress

from . import NotQuadratic
from . import SolverFailure
from .coeff import CoefficientField
from .coeff import RandomFieldModel
from .coeff import required_cells
from .coeff import sample_field
from .coeff import split_compressibility
from .geometry import build_box_mask
from .geometry import build_cube_mask
from .grid import DiscreteVectorField
from .grid import discrete_divergence
from .grid import filtered_pressure
from .grid import vector_laplacian
from .norms import HMinusOneProblem
from .norms import dual_h_minus1
from .norms import mean_square
from .solve import DirichletCellProblem
from .solve import NeumannCellProblem
from .solve import affine_values
from .solve import solve_elasticity_dirichlet

logger_for_estimate = getLogger(f"{__name__}.estimate")
logger_for_corrector = getLogger(f"{__name__}.corrector")
logger_for_rate = getLogger(f"{__name__}.rate")

A_D = 'A_D'
A_STAR_D = 'A_*D'
A_HAT = 'A_hat'
A_BAR_LAMBDA = 'A_bar_lambda'
A_LAMBDA_D = 'A_lambda_D'
PROVENANCES = (A_D, A_STAR_D, A_HAT, A_BAR_LAMBDA, A_LAMBDA_D)

# Orthonormal basis of traceless 2×2 matrices, as columns over flattened indices.
TRACELESS_BASIS = np.array([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, -1.0] / np.sqrt(2.0)]).T
TRACELESS_BASIS.setflags(write=False)

# Relative polarization residual above which energies are not a quadratic form.
POLARIZATION_TOLERANCE = 1e-8
CONFIDENCE = 1.96


@dataclass(frozen=True, eq=False)
class QuadraticFormMatrix:
    """
    Symmetric 4×4 matrix of the form ``P ↦ P·MP``.

    :param matrix: the matrix over flattened indices.
    :param provenance: one of ``A_D``, ``A_*D``, ``A_hat``, ``A_bar_lambda``, ``A_lambda_D``.
    :param subspace: columns spanning the subspace the form is meaningful on (``None`` for all matrices).
    """

    matrix: np.ndarray
    provenance: str
    subspace: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}, got {self.provenance!r}.")
        matrix = np.array(self.matrix, dtype=float)
        if matrix.shape != (4, 4):
            raise ValueError(f"matrix must be 4×4, got {matrix.shape}.")
        scale = max(float(np.abs(matrix).max()), 1.0)
        if np.abs(matrix - matrix.T).max() > 1e-10 * scale:
            raise ValueError("matrix is not symmetric.")
        matrix = 0.5 * (matrix + matrix.T)
        matrix.setflags(write=False)
        object.__setattr__(self, 'matrix', matrix)

    def __repr__(self):
        return f"QuadraticFormMatrix({self.provenance}, eigenvalues={self.eigenvalues().round(6).tolist()})"

    def eigenvalues(self):
        if self.subspace is None:
            return np.linalg.eigvalsh(self.matrix)
        return np.linalg.eigvalsh(self.subspace.T @ self.matrix @ self.subspace)

    def energy(self, P):
        flat = np.asarray(P, dtype=float).ravel()
        return 0.5 * float(flat @ self.matrix @ flat)

    def within(self, lower, upper, tolerance=1e-6):
        eigenvalues = self.eigenvalues()
        return bool(eigenvalues[0] >= lower - tolerance and eigenvalues[-1] <= upper + tolerance)

    def as_dict(self):
        return {'provenance': self.provenance, 'matrix': self.matrix.tolist(), 'eigenvalues': self.eigenvalues().tolist()}


def _unit(index):
    P = np.zeros(4)
    P[index] = 1.0
    return P.reshape(2, 2)


PAIRS = tuple((p, q) for p in range(4) for q in range(p + 1, 4))


def probe_matrices():
    """
    The probe set: 4 basis matrices, their 6 pairwise sums and their 6 pairwise differences, in that order.
    """
    basis = [_unit(p) for p in range(4)]
    sums = [basis[p] + basis[q] for p, q in PAIRS]
    differences = [basis[p] - basis[q] for p, q in PAIRS]
    return basis + sums + differences


def recover_quadratic_matrix(energies, provenance=A_D, subspace=None):
    """
    Polarize energies ``E(P) = ½P·MP`` given on :func:`probe_matrices`; the differences are re-predicted as a check.
    """
    energies = np.asarray(energies, dtype=float)
    if energies.shape != (16,):
        raise ValueError(f"Expected 16 probe energies, got shape {energies.shape}.")
    basis, sums, differences = energies[:4], energies[4:10], energies[10:]
    matrix = np.diag(2 * basis)
    for (p, q), value in zip(PAIRS, sums):
        matrix[p, q] = matrix[q, p] = value - basis[p] - basis[q]
    predicted = np.array([0.5 * (matrix[p, p] + matrix[q, q]) - matrix[p, q] for p, q in PAIRS])
    scale = max(float(np.abs(energies).max()), np.finfo(float).tiny)
    residual = float(np.abs(predicted - differences).max()) / scale
    if residual > POLARIZATION_TOLERANCE:
        raise NotQuadratic(f"Polarization residual {residual!r} exceeds {POLARIZATION_TOLERANCE!r}.")
    return QuadraticFormMatrix(matrix, provenance, subspace)


def dual_matrix(star: QuadraticFormMatrix):
    """``A_{*D}``: the inverse of the ``μ*`` form on traceless matrices, embedded back into 4×4."""
    T = TRACELESS_BASIS
    reduced = np.linalg.inv(T.T @ star.matrix @ T)
    return QuadraticFormMatrix(T @ reduced @ T.T, A_STAR_D, T)


def cube_field(model: RandomFieldModel, seed, level):
    """A realization covering ``□_level`` with unit cells."""
    side = 3**level
    return sample_field(model, seed, 1.0, side, half_width=0.5 * side)


def _cube(level, elements_per_cell):
    return build_cube_mask(level, elements_per_cell)


def mu(field: CoefficientField, m, P, elements_per_cell=8, settings=None):
    """``μ(□_m, P)``: the constrained Dirichlet cell energy."""
    return DirichletCellProblem(field, _cube(m, elements_per_cell), True, settings=settings).solve(P).energy


def mu_star(field: CoefficientField, m, Q, elements_per_cell=8, settings=None):
    """``μ*(□_m, Q)``: the Neumann cell value."""
    return NeumannCellProblem(field, _cube(m, elements_per_cell), settings).solve(Q).value


def mu_lambda(field: CoefficientField, m, P, lambda0, elements_per_cell=8, settings=None):
    """``μ_λ(□_m, P)``: the unconstrained cell energy with penalty ``lambda0``."""
    return DirichletCellProblem(field, _cube(m, elements_per_cell), False, lambda0, settings).solve(P).energy


def J(field: CoefficientField, m, P, Q, elements_per_cell=8, settings=None):
    """``μ(□_m, P) + μ*(□_m, Q) - P·Q``; nonnegative for traceless ``P``."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    return mu(field, m, P, elements_per_cell, settings) + mu_star(field, m, Q, elements_per_cell, settings) - float(np.sum(P * Q))


def subadditivity_slack(field: CoefficientField, m, P, elements_per_cell=8, settings=None, lambda0=None):
    """
    ``μ(□_{m+1}, P) - 3⁻² Σ μ(□_m^{(i)}, P)`` on one realization covering ``□_{m+1}``; nonpositive up to roundoff.

    With ``lambda0`` the unconstrained ``μ_λ`` is used instead.
    """
    side = 3**m
    if field.cells_per_side != 3 * side:
        raise ValueError(f"Field must have {3 * side} cells per side for level {m + 1}, got {field.cells_per_side}.")

    def energy(part, level):
        if lambda0 is None:
            return mu(part, level, P, elements_per_cell, settings)
        return mu_lambda(part, level, P, lambda0, elements_per_cell, settings)

    parts = [energy(field.window((a * side, b * side), side), m) for b in range(3) for a in range(3)]
    return energy(field, m + 1) - float(np.mean(parts))


class QuadraticResponse(NamedTuple):
    difference: float
    lower: float
    upper: float

    @property
    def holds(self):
        scale = max(abs(self.upper), 1.0)
        return self.lower - 1e-8 * scale <= self.difference <= self.upper + 1e-8 * scale


def quadratic_response(problem: DirichletCellProblem, P, generator, amplitude=1.0):
    """
    Energy increase of a random admissible competitor ``ν + δφ`` against the bracket
    ``[½λ_min, ½λ_max] · ⨏|∇(δφ)|²`` (plus ``½λ₀⨏(∇·δφ)²`` on the upper side when unconstrained).
    """
    solution = problem.solve(P)
    perturbation = problem.admissible_perturbation(generator)
    domain = problem.domain
    laplacian = vector_laplacian(domain)
    gradient = float(perturbation @ (laplacian @ perturbation)) / domain.area
    perturbation = perturbation * (amplitude / math.sqrt(gradient))
    gradient = amplitude**2
    trace = float(np.trace(np.asarray(P, dtype=float)))
    energy, _ = problem.energies(solution.field.flat + perturbation, trace)
    eigenvalues = np.linalg.eigvalsh(problem.operator.tensors)
    lower = 0.5 * float(eigenvalues.min()) * gradient
    upper = 0.5 * float(eigenvalues.max()) * gradient
    if problem.lambda0:
        divergence = discrete_divergence(DiscreteVectorField(perturbation.reshape(-1, 2), domain)).values
        upper += 0.5 * problem.lambda0 * float(np.mean(divergence**2))
    return QuadraticResponse(energy - solution.energy, lower, upper)


def _threads():
    value = os.getenv('HOMOGENLAB_THREADS', '1')
    try:
        threads = int(value)
    except ValueError:
        raise ValueError(f"HOMOGENLAB_THREADS must be an integer, got {value!r}.") from None
    return max(threads, 1)


def map_seeds(function, seeds):
    """
    ``[function(seed) for seed in seeds]`` on up to ``HOMOGENLAB_THREADS`` threads, results in seed order.
    """
    seeds = list(seeds)
    threads = min(_threads(), len(seeds))
    if threads <= 1:
        return [function(seed) for seed in seeds]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(function, seeds))


def _with_seed(seed, function, *args):
    try:
        return function(*args)
    except SolverFailure as exc:
        raise SolverFailure(f"Seed {seed}: {exc}", exc.residual, f"seed {seed}: {exc.stage}") from exc


class MatrixInterval(NamedTuple):
    """Per-entry ``CONFIDENCE·std/√n`` half widths with the samples they come from."""

    half_width: np.ndarray
    std: np.ndarray
    samples: np.ndarray
    seeds: Tuple[int, ...]

    def as_dict(self):
        return {
            'half_width': self.half_width.tolist(),
            'std': self.std.tolist(),
            'n_samples': len(self.seeds),
            'seeds': list(self.seeds),
        }


def _summarize(samples, seeds, provenance, subspace=None):
    samples = np.array(samples)
    std = samples.std(axis=0, ddof=1)
    interval = MatrixInterval(CONFIDENCE * std / math.sqrt(len(samples)), std, samples, tuple(seeds))
    return QuadraticFormMatrix(samples.mean(axis=0), provenance, subspace), interval


def _check_samples(n_samples):
    if n_samples < 2:
        raise ValueError(f"n_samples must be at least 2, got {n_samples!r}.")


def dirichlet_matrix(field: CoefficientField, m, elements_per_cell=8, settings=None):
    """``A_D(□_m)`` of one realization."""
    problem = DirichletCellProblem(field, _cube(m, elements_per_cell), True, settings=settings)
    return recover_quadratic_matrix([problem.solve(P).energy for P in probe_matrices()], A_D)


def lambda_matrix(field: CoefficientField, m, lambda0, elements_per_cell=8, settings=None):
    """``A_λ(□_m)`` of one realization, from centered unconstrained energies."""
    problem = DirichletCellProblem(field, _cube(m, elements_per_cell), False, lambda0, settings)
    return recover_quadratic_matrix([problem.solve(P).centered_energy for P in probe_matrices()], A_LAMBDA_D)


def neumann_matrix(field: CoefficientField, m, elements_per_cell=8, settings=None):
    """``A_{*D}(□_m)`` of one realization."""
    problem = NeumannCellProblem(field, _cube(m, elements_per_cell), settings)
    star = recover_quadratic_matrix([problem.solve(Q).value for Q in probe_matrices()], A_STAR_D, TRACELESS_BASIS)
    return dual_matrix(star)


def estimate_A_hat(model: RandomFieldModel, m, n_samples, seed0, elements_per_cell=8, settings=None):
    """
    Mean of ``A_D(□_m)`` over seeds ``seed0 .. seed0 + n_samples - 1`` with per-entry confidence half widths.
    """
    _check_samples(n_samples)
    seeds = range(seed0, seed0 + n_samples)

    def one(seed):
        field = split_compressibility(cube_field(model, seed, m))
        return _with_seed(seed, dirichlet_matrix, field, m, elements_per_cell, settings).matrix

    logger_for_estimate.debug("Estimating A_hat at level %s over %s seeds ...", m, n_samples)
    estimate, interval = _summarize(map_seeds(one, seeds), seeds, A_HAT)
    logger_for_estimate.info("Estimated %r.", estimate)
    return estimate, interval


def estimate_A_bar_lambda(model: RandomFieldModel, m, lambda0, n_samples, seed0, elements_per_cell=8, settings=None):
    """
    Mean of ``A_λ(□_m)`` with ``λ = lambda0 + b`` after splitting, over the same seeds as :func:`estimate_A_hat`.
    """
    _check_samples(n_samples)
    if lambda0 < 0:
        raise ValueError(f"lambda0 must be nonnegative, got {lambda0!r}.")
    seeds = range(seed0, seed0 + n_samples)

    def one(seed):
        field = split_compressibility(cube_field(model, seed, m)).with_lambda0(lambda0)
        return _with_seed(seed, lambda_matrix, field, m, lambda0, elements_per_cell, settings).matrix

    logger_for_estimate.debug("Estimating A_bar at lambda0=%r, level %s over %s seeds ...", lambda0, m, n_samples)
    estimate, interval = _summarize(map_seeds(one, seeds), seeds, A_BAR_LAMBDA)
    logger_for_estimate.info("Estimated %r at lambda0=%r.", estimate, lambda0)
    return estimate, interval


class CorrectorSample(NamedTuple):
    """
    Finite-volume corrector ``Φ`` (zero on ``∂□_n``) and pressure ``Π`` for ``P = P_j^β``, with errors measured on the
    rescaled cube ``ε□_n``, ``ε = 3^{-n}``.
    """

    seed: Optional[int]
    level: int
    direction: Tuple[int, int]
    corrector: DiscreteVectorField
    pressure: object
    flux_error: float
    displacement_error: float
    pressure_error: float
    constraint_residual: float


def finite_volume_corrector(field: CoefficientField, n, direction, a_hat, seed=None, elements_per_cell=8, settings=None):
    """
    :param field: realization covering ``□_n``.
    :param n: cube level.
    :param direction: ``(j, β)``.
    :param a_hat: :class:`QuadraticFormMatrix` or 4×4 array used for the flux error.
    """
    j, beta = direction
    if j not in (0, 1) or beta not in (0, 1):
        raise ValueError(f"direction must have entries in {{0, 1}}, got {direction!r}.")
    a_hat = np.asarray(a_hat.matrix if isinstance(a_hat, QuadraticFormMatrix) else a_hat, dtype=float)
    cube = _cube(n, elements_per_cell)
    P = np.zeros((2, 2))
    P[beta, j] = 1.0
    solution = DirichletCellProblem(field, cube, True, settings=settings).solve(P)
    corrector = DiscreteVectorField(solution.field.values - affine_values(cube, P), cube)
    epsilon = 3.0 ** (-n)
    elements = cube.active_elements
    tensors = field.effective_tensors(cube.active_centers)
    gradients = solution.field.gauss_gradients(elements).mean(axis=1)
    flux = np.einsum('eij,ej->ei', tensors, gradients) - a_hat @ P.ravel()
    riesz = HMinusOneProblem(cube, settings)
    sample = CorrectorSample(
        seed,
        n,
        (j, beta),
        corrector,
        solution.pressure,
        epsilon * riesz.dual(flux),
        epsilon * math.sqrt(mean_square(corrector, elements)),
        epsilon * riesz.dual(solution.pressure.values),
        float(np.abs(discrete_divergence(corrector).values).max()),
    )
    logger_for_corrector.debug("Corrector n=%s direction=%r: flux error %r, pressure error %r.", n, direction, sample.flux_error, sample.pressure_error)
    return sample


class RateTable(NamedTuple):
    """
    Homogenization errors per ``ε`` (means and sample standard deviations over seeds) and fitted log-log slopes;
    the confidence half widths are twice the regression standard errors.
    """

    epsilons: np.ndarray
    l2_error_mean: np.ndarray
    l2_error_std: np.ndarray
    hminus1_error_mean: np.ndarray
    hminus1_error_std: np.ndarray
    n_samples: int
    l2_slope: float
    l2_slope_ci: float
    hminus1_slope: float
    hminus1_slope_ci: float

    COLUMNS = ('epsilon', 'l2_error_mean', 'l2_error_std', 'hminus1_error_mean', 'hminus1_error_std', 'n_samples')

    def rows(self):
        for index, epsilon in enumerate(self.epsilons):
            yield (
                float(epsilon),
                float(self.l2_error_mean[index]),
                float(self.l2_error_std[index]),
                float(self.hminus1_error_mean[index]),
                float(self.hminus1_error_std[index]),
                self.n_samples,
            )


def fit_slope(scales, values):
    """Slope of ``log values`` against ``log scales`` and twice its standard error; ``nan`` unless all scales and values are positive."""
    scales = np.asarray(scales, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.unique(scales).size < 2 or not np.all(scales > 0) or not np.all(values > 0):
        return math.nan, math.nan
    if scales.size == 2:
        slope = float(np.diff(np.log(values))[0] / np.diff(np.log(scales))[0])
        return slope, math.nan
    fit = linregress(np.log(scales), np.log(values))
    return float(fit.slope), float(2 * fit.stderr)


def homogenization_rate_experiment(
    model: RandomFieldModel,
    f,
    epsilons,
    lambda0,
    n_samples,
    seed0,
    a_bar=None,
    half_width=0.5,
    cell_level=1,
    elements_per_cell=8,
    settings=None,
):
    """
    ``‖u^ε - u⁰‖_{L²}`` and the dual norm of the pressure difference on the box ``(-half_width, half_width)²``,
    where ``u⁰`` solves the problem with the constant ``Ā_λ``.

    :param f: boundary data, callable on points.
    :param a_bar: ``Ā_λ`` (estimated at ``cell_level`` over the same seeds when omitted).
    """
    _check_samples(n_samples)
    epsilons = np.asarray(sorted(epsilons, reverse=True), dtype=float)
    if a_bar is None:
        a_bar, _ = estimate_A_bar_lambda(model, cell_level, lambda0, n_samples, seed0, elements_per_cell, settings)
    a_bar = np.asarray(a_bar.matrix if isinstance(a_bar, QuadraticFormMatrix) else a_bar, dtype=float)
    homogenized = CoefficientField.uniform(a_bar, lambda0, half_width)
    l2_errors = np.empty((len(epsilons), n_samples))
    hminus1_errors = np.empty((len(epsilons), n_samples))
    seeds = range(seed0, seed0 + n_samples)
    for row, epsilon in enumerate(epsilons):
        mask = build_box_mask(epsilon / elements_per_cell, (0.0, 0.0), half_width)
        reference = solve_elasticity_dirichlet(homogenized, lambda0, mask, f, settings=settings)
        reference_pressure = filtered_pressure(reference, lambda0)

        def one(seed):
            sampled = sample_field(model, seed, epsilon, required_cells(epsilon, half_width), half_width)
            field = split_compressibility(sampled).with_lambda0(lambda0)
            u = _with_seed(seed, solve_elasticity_dirichlet, field, lambda0, mask, f, None, settings)
            difference = u - reference
            l2 = math.sqrt(mean_square(difference, mask.active_elements))
            hminus1 = dual_h_minus1(filtered_pressure(u, lambda0) - reference_pressure, mask)
            return l2, hminus1

        results = np.array(map_seeds(one, seeds))
        l2_errors[row], hminus1_errors[row] = results[:, 0], results[:, 1]
        logger_for_rate.debug("epsilon=%r: mean L2 error %r.", epsilon, l2_errors[row].mean())
    l2_mean = l2_errors.mean(axis=1)
    hminus1_mean = hminus1_errors.mean(axis=1)
    l2_slope, l2_ci = fit_slope(epsilons, l2_mean)
    hminus1_slope, hminus1_ci = fit_slope(epsilons, hminus1_mean)
    table = RateTable(
        epsilons,
        l2_mean,
        l2_errors.std(axis=1, ddof=1),
        hminus1_mean,
        hminus1_errors.std(axis=1, ddof=1),
        n_samples,
        l2_slope,
        l2_ci,
        hminus1_slope,
        hminus1_ci,
    )
    logger_for_rate.info("Homogenization rate at lambda0=%r: L2 slope %r ± %r.", lambda0, l2_slope, l2_ci)
    return table


class SubadditiveSample(NamedTuple):
    """
    Cell quantities of one realization on ``□_m``; ``mu_lambda[i, k]`` belongs to ``probes[i][0]`` and ``lambdas[k]``.
    """

    seed: int
    level: int
    mu: np.ndarray
    mu_star: np.ndarray
    J: np.ndarray
    mu_lambda: np.ndarray


def random_probes(seed, count=3):
    """``count`` deterministic traceless pairs ``(P, Q)`` for one seed."""
    generator = np.random.Generator(np.random.Philox(key=int(seed) & ((1 << 64) - 1)))
    probes = []
    for _ in range(count):
        P = (TRACELESS_BASIS @ generator.standard_normal(3)).reshape(2, 2)
        Q = (TRACELESS_BASIS @ generator.standard_normal(3)).reshape(2, 2)
        probes.append((P, Q))
    return probes


def subadditive_sample(model: RandomFieldModel, seed, m, probes=None, lambdas=(), elements_per_cell=8, settings=None):
    field = split_compressibility(cube_field(model, seed, m))
    cube = _cube(m, elements_per_cell)
    probes = random_probes(seed) if probes is None else probes
    dirichlet = DirichletCellProblem(field, cube, True, settings=settings)
    neumann = NeumannCellProblem(field, cube, settings)
    mus = np.array([dirichlet.solve(P).energy for P, _ in probes])
    stars = np.array([neumann.solve(Q).value for _, Q in probes])
    gaps = mus + stars - np.array([float(np.sum(P * Q)) for P, Q in probes])
    penalized = np.empty((len(probes), len(lambdas)))
    for k, value in enumerate(lambdas):
        problem = DirichletCellProblem(field.with_lambda0(value), cube, False, value, settings)
        penalized[:, k] = [problem.solve(P).energy for P, _ in probes]
    return SubadditiveSample(int(seed), int(m), mus, stars, gaps, penalized)
