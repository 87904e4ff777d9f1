"""
Linear solves and the PDE drivers built on them.
"""
import csv
import math
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator
from scipy.sparse.linalg import cg
from scipy.sparse.linalg import minres
from scipy.sparse.linalg import splu
from scipy.stats import linregress

from . import CompatibilityError
from . import SolverFailure
from .coeff import CoefficientField
from .geometry import DomainMask
from .grid import G_REF
from .grid import AssembledOperator
from .grid import DiscreteScalarField
from .grid import DiscreteVectorField
from .grid import assemble_mixed_stokes
from .grid import assemble_penalized_elasticity
from .grid import assemble_vector
from .grid import block
from .grid import compatible_divergence
from .grid import component_means
from .grid import discrete_divergence
from .grid import element_dofs
from .grid import lift_boundary_data
from .grid import pressure_kernel_labels
from .grid import vector_laplacian

logger_for_factor = getLogger(f"{__name__}.factor")
logger_for_solve = getLogger(f"{__name__}.solve")
logger_for_expansion = getLogger(f"{__name__}.expansion")
logger_for_cell = getLogger(f"{__name__}.cell")
logger_for_export = getLogger(f"{__name__}.export")

DIRECT = 'direct'
KRYLOV = 'krylov'
METHODS = (DIRECT, KRYLOV)

# Relative size of a kernel-component sum above which Stokes data is rejected.
COMPATIBILITY_TOLERANCE = 1e-8
# Relative growth counted as an increase of the expansion residual.
GROWTH_FACTOR = 1 + 1e-3
GROWTH_FLOOR = 1e-12
# Iterative-refinement passes of a direct solve before its residual is checked.
REFINEMENT_STEPS = 2


@dataclass(frozen=True)
class SolverSettings:
    """
    :param tolerance: relative residual target, in ``(0, 1e-4]``.
    :param max_iterations: Krylov iteration cap, at least 100.
    :param method: ``direct`` (sparse LU) or ``krylov`` (CG for definite, MINRES for saddle systems).
    """

    tolerance: float = 1e-10
    max_iterations: int = 10000
    method: str = DIRECT

    def __post_init__(self):
        if not 0 < self.tolerance <= 1e-4:
            raise ValueError(f"tolerance must lie in (0, 1e-4], got {self.tolerance!r}.")
        if self.max_iterations < 100:
            raise ValueError(f"max_iterations must be at least 100, got {self.max_iterations!r}.")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}.")


def _relative(value, reference):
    return value / reference if reference > 0 else value


class LinearSystem:
    """
    A sparse system factorized (``direct``) or prepared (``krylov``) once and solved for many right-hand sides.

    :param matrix: square sparse matrix.
    :param settings: :class:`SolverSettings`.
    :param definite: whether CG applies; otherwise MINRES is used in ``krylov`` mode.
    :param stage: name reported in failures.
    """

    def __init__(self, matrix, settings: Optional[SolverSettings] = None, definite=True, stage='solve'):
        self.settings = settings or SolverSettings()
        self.definite = definite
        self.stage = stage
        self.matrix = sparse.csc_matrix(matrix)
        self.history: List[float] = []
        self._factor = None
        if self.settings.method == DIRECT:
            logger_for_factor.debug("Factorizing %s system of size %s ...", stage, self.matrix.shape[0])
            try:
                self._factor = splu(self.matrix)
            except RuntimeError as exc:
                raise SolverFailure(f"Factorization of the {stage} system failed: {exc}", stage=stage) from exc

    @property
    def size(self):
        return self.matrix.shape[0]

    def residual(self, solution, rhs):
        return _relative(float(np.linalg.norm(self.matrix @ solution - rhs)), float(np.linalg.norm(rhs)))

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if not np.any(rhs):
            self.history = [0.0]
            return np.zeros(self.size), 0.0
        if self._factor is not None:
            solution = self._factor.solve(rhs)
            residual = self.residual(solution, rhs)
            self.history = [residual]
            for _ in range(REFINEMENT_STEPS):
                if not residual > self.settings.tolerance:
                    break
                solution = solution + self._factor.solve(rhs - self.matrix @ solution)
                residual = self.residual(solution, rhs)
                self.history.append(residual)
            if not np.isfinite(residual):
                raise SolverFailure(f"The {self.stage} solve produced non-finite values.", residual, self.stage)
            if residual > self.settings.tolerance:
                raise SolverFailure(
                    f"The direct {self.stage} solve left residual {residual!r} above tolerance {self.settings.tolerance!r}.", residual, self.stage
                )
            return solution, residual
        return self._iterate(rhs)

    def _iterate(self, rhs):
        settings = self.settings
        norm = float(np.linalg.norm(rhs))
        history = []

        def record(iterate):
            history.append(float(np.linalg.norm(self.matrix @ iterate - rhs)) / norm)

        if self.definite:
            diagonal = self.matrix.diagonal()
            preconditioner = LinearOperator(self.matrix.shape, matvec=lambda x: np.ravel(x) / diagonal)
            solution, info = cg(
                self.matrix, rhs, rtol=settings.tolerance, atol=0.0, maxiter=settings.max_iterations, M=preconditioner, callback=record
            )
        else:
            solution, info = minres(self.matrix, rhs, rtol=settings.tolerance, maxiter=settings.max_iterations, callback=record)
        self.history = history
        residual = self.residual(solution, rhs)
        logger_for_solve.debug("Krylov %s solve: %s iterations, residual %r.", self.stage, len(history), residual)
        if info != 0:
            raise SolverFailure(f"The {self.stage} solve did not converge (info={info}, residual {residual!r}).", residual, self.stage)
        return solution, residual


class SaddleSystem:
    """
    ``[K Bᵀ; B -S]`` with one pressure unknown removed per kernel component (labels ``>= 0``).

    :param stiffness: ``K`` over the free velocity unknowns.
    :param divergence: ``B`` with rows over active elements and columns over the free unknowns.
    :param labels: per active element kernel component, ``-1`` for elements outside any component.
    :param settings: :class:`SolverSettings`.
    :param stabilization: ``S`` over active elements, or ``None`` for the exact constraint.
    :param stage: name reported in failures.
    """

    def __init__(self, stiffness, divergence, labels, settings=None, stabilization=None, stage='saddle'):
        self.labels = np.asarray(labels)
        self.velocity_size = stiffness.shape[0]
        self.pressure_size = divergence.shape[0]
        valid = np.flatnonzero(self.labels >= 0)
        _, first = np.unique(self.labels[valid], return_index=True)
        self.pinned = valid[first]
        self.kept = np.setdiff1d(np.arange(self.pressure_size), self.pinned)
        kept_divergence = sparse.csr_matrix(divergence)[self.kept]
        lower = None if stabilization is None else -block(sparse.csr_matrix(stabilization), self.kept, self.kept)
        matrix = sparse.bmat([[stiffness, kept_divergence.T], [kept_divergence, lower]], format='csc')
        self.system = LinearSystem(matrix, settings, definite=False, stage=stage)

    @property
    def history(self):
        return self.system.history

    def check_compatibility(self, rhs_velocity, rhs_pressure):
        valid = self.labels >= 0
        if not valid.any():
            return
        sums = np.bincount(self.labels[valid], weights=rhs_pressure[valid])
        scale = max(np.abs(rhs_pressure).sum(), np.abs(rhs_velocity).sum(), np.finfo(float).tiny)
        worst = float(np.abs(sums).max())
        if worst > COMPATIBILITY_TOLERANCE * scale:
            raise CompatibilityError(
                f"Divergence data violates the compatibility condition: component sum {worst!r} against data size {scale!r}."
            )

    def solve(self, rhs_velocity, rhs_pressure):
        """
        :returns: ``(velocity, pressure, residual)`` with the pressure zero-mean on every kernel component.
        """
        rhs_velocity = np.asarray(rhs_velocity, dtype=float)
        rhs_pressure = np.asarray(rhs_pressure, dtype=float)
        self.check_compatibility(rhs_velocity, rhs_pressure)
        solution, residual = self.system.solve(np.concatenate([rhs_velocity, rhs_pressure[self.kept]]))
        pressure = np.zeros(self.pressure_size)
        pressure[self.kept] = solution[self.velocity_size :]
        pressure -= component_means(pressure, self.labels)
        return solution[: self.velocity_size], pressure, residual


def _element_data(domain: DomainMask, g):
    count = domain.active_elements.size
    if g is None:
        return np.zeros(count)
    if isinstance(g, DiscreteScalarField):
        return np.asarray(g.values, dtype=float)
    if callable(g):
        return np.asarray(g(domain.active_centers), dtype=float).reshape(count)
    values = np.asarray(g, dtype=float)
    return np.full(count, float(values)) if values.ndim == 0 else values.reshape(count)


def _assemble_field(domain: DomainMask, free_values, lift, residual=None):
    values = lift.copy()
    values.reshape(-1)[domain.free_dofs] = free_values
    return DiscreteVectorField(values, domain, residual)


def solve_elasticity_dirichlet(field: CoefficientField, lambda0, domain: DomainMask, f=None, F=None, settings=None):
    """
    Penalized elasticity ``∇·(Ã∇u) + λ₀∇(∇·u) = F`` in the domain with ``u = f`` on the Dirichlet nodes.
    """
    operator = assemble_penalized_elasticity(field, lambda0, domain)
    rhs, lift = operator.load(F, f)
    logger_for_solve.debug("Solving elasticity on %r with lambda0=%r ...", domain, lambda0)
    solution, residual = LinearSystem(operator.matrix, settings, definite=True, stage='elasticity').solve(rhs)
    return _assemble_field(domain, solution, lift, residual)


def stokes_labels(operator: AssembledOperator, stabilized):
    if stabilized:
        _, labels = operator.domain.element_labels(operator.domain.active_elements)
        return labels
    return operator.labels


def solve_stokes_dirichlet(field: CoefficientField, domain: DomainMask, f=None, g=None, F=None, settings=None, stabilized=True):
    """
    Stokes system ``∇·(A∇v) - ∇p = F``, ``∇·v = g`` with ``v = f`` on the Dirichlet nodes.

    :param g: prescribed divergence: ``None``, a constant, a callable on element centers, per-element values or a
        :class:`DiscreteScalarField`.
    :param stabilized: use the pressure-jump stabilized system; otherwise the exact constraint.
    :returns: ``(velocity, pressure)``; the pressure has zero mean.
    """
    operator = assemble_mixed_stokes(field, domain)
    rhs_velocity, lift = operator.load(F, f)
    rhs_pressure = domain.element_area * _element_data(domain, g) - operator.divergence @ lift.ravel()
    stabilization = operator.stabilization if stabilized else None
    saddle = SaddleSystem(
        operator.matrix, operator.free_divergence, stokes_labels(operator, stabilized), settings, stabilization, stage='stokes'
    )
    logger_for_solve.debug("Solving Stokes on %r (stabilized=%s) ...", domain, stabilized)
    velocity, pressure, residual = saddle.solve(rhs_velocity, rhs_pressure)
    return _assemble_field(domain, velocity, lift, residual), DiscreteScalarField(pressure, domain)


class ExpansionResult(NamedTuple):
    """
    :param terms: ``(v_k, p_k)`` for ``k = 0..ℓ``.
    :param partial_sums: ``(w_ℓ, π_ℓ)`` with ``w_ℓ = Σ λ^{-k} v_k`` and ``π_ℓ = λg₀ + Σ λ^{-k} p_k``.
    :param residual_norms: per ``ℓ``, relative gradient and pressure errors against the direct penalized solve.
    :param ratio_estimate: fitted geometric ratio of the residuals.
    :param diverged: two consecutive residual increases were observed.
    :param direct: the direct penalized solution and its pressure ``λ∇·u``.
    """

    terms: List[Tuple[DiscreteVectorField, DiscreteScalarField]]
    partial_sums: List[Tuple[DiscreteVectorField, DiscreteScalarField]]
    residual_norms: np.ndarray
    ratio_estimate: float
    diverged: bool
    direct: Tuple[DiscreteVectorField, DiscreteScalarField]


def _fit_ratio(residuals):
    positive = residuals > 0
    if positive.sum() < 2:
        return math.nan
    levels = np.flatnonzero(positive)
    slope, _ = np.polyfit(levels, np.log(residuals[positive]), 1)
    return float(np.exp(slope))


def expansion_solve(field: CoefficientField, domain: DomainMask, f=None, F=None, lambda0=1.0, ell_max=3, settings=None):
    """
    Approximate the penalized solution by ``Σ λ^{-k} v_k`` where every term solves an exact-constraint Stokes system.

    ``v₀`` carries the boundary data and the divergence ``g₀`` (the compatible divergence of ``f``); the term
    ``k ≥ 1`` has zero boundary data and divergence ``p_{k-1}``.
    """
    if not lambda0 > 0:
        raise ValueError(f"lambda0 must be positive, got {lambda0!r}.")
    if ell_max < 0:
        raise ValueError(f"ell_max must be nonnegative, got {ell_max!r}.")
    operator = assemble_penalized_elasticity(field, lambda0, domain)
    free = domain.free_dofs
    lift = lift_boundary_data(domain, f)
    area = domain.element_area

    direct_rhs = operator.volume_load(F) - operator.full_matrix @ lift.ravel()
    direct_solution, direct_residual = LinearSystem(operator.matrix, settings, definite=True, stage='direct penalized').solve(direct_rhs[free])
    direct = _assemble_field(domain, direct_solution, lift, direct_residual)
    direct_pressure = lambda0 * discrete_divergence(direct).values

    saddle = SaddleSystem(block(operator.stiffness, free, free), operator.free_divergence, operator.labels, settings, stage='expansion')
    g0 = compatible_divergence(f, domain).values
    laplacian = vector_laplacian(domain)
    difference_norm = _gradient_norm(laplacian)
    reference_gradient = difference_norm(direct.flat)
    reference_pressure = float(np.linalg.norm(direct_pressure))

    terms, partial_sums, residuals = [], [], []
    velocity_sum = np.zeros_like(lift)
    pressure_sum = lambda0 * g0
    diverged = False
    rhs_velocity = (operator.volume_load(F) - operator.stiffness @ lift.ravel())[free]
    rhs_pressure = area * g0 - operator.divergence @ lift.ravel()
    term_lift = lift
    for k in range(ell_max + 1):
        try:
            velocity, pressure, residual = saddle.solve(rhs_velocity, rhs_pressure)
        except SolverFailure as exc:
            raise SolverFailure(f"Expansion term {k} failed: {exc}", exc.residual, f"expansion term {k}") from exc
        term = _assemble_field(domain, velocity, term_lift, residual)
        terms.append((term, DiscreteScalarField(pressure, domain)))
        weight = lambda0 ** (-k)
        velocity_sum = velocity_sum + weight * term.values
        pressure_sum = pressure_sum + weight * pressure
        partial_sums.append((DiscreteVectorField(velocity_sum, domain), DiscreteScalarField(pressure_sum, domain)))
        gradient_error = _relative(difference_norm(velocity_sum.ravel() - direct.flat), reference_gradient)
        pressure_error = _relative(float(np.linalg.norm(pressure_sum - direct_pressure)), reference_pressure)
        residuals.append((gradient_error, pressure_error))
        logger_for_expansion.debug("Term %s: gradient error %r, pressure error %r.", k, gradient_error, pressure_error)
        if _growing(residuals):
            diverged = True
            logger_for_expansion.warning("Expansion diverges at term %s: lambda0=%r is below the expansion threshold.", k, lambda0)
            break
        rhs_velocity = np.zeros_like(rhs_velocity)
        rhs_pressure = area * pressure
        term_lift = np.zeros_like(lift)

    residual_norms = np.array(residuals)
    ratio = _fit_ratio(residual_norms.max(axis=1))
    logger_for_expansion.info("Expansion with lambda0=%r: %s terms, ratio %r, diverged=%s.", lambda0, len(terms), ratio, diverged)
    return ExpansionResult(terms, partial_sums, residual_norms, ratio, diverged, (direct, DiscreteScalarField(direct_pressure, domain)))


def _growing(residuals):
    if len(residuals) < 3:
        return False
    last, middle, first = (max(values) for values in residuals[-1:-4:-1])
    return last > GROWTH_FLOOR and last > GROWTH_FACTOR * middle and middle > GROWTH_FACTOR * first


def _gradient_norm(laplacian):
    def norm(values):
        return math.sqrt(max(float(values @ (laplacian @ values)), 0.0))

    return norm


class CorrectorSolution(NamedTuple):
    """
    :param field: the minimizer ``ν``.
    :param pressure: the multiplier ``ς`` (constrained mode only).
    :param energy: the attained averaged energy.
    :param centered_energy: ``energy - ½λ₀Tr(P)²``, computed without cancellation.
    """

    field: DiscreteVectorField
    pressure: Optional[DiscreteScalarField]
    energy: float
    centered_energy: float


class NeumannSolution(NamedTuple):
    field: DiscreteVectorField
    pressure: DiscreteScalarField
    value: float


def _as_matrix(P):
    P = np.asarray(P, dtype=float)
    if P.shape != (2, 2):
        raise ValueError(f"Expected a 2×2 matrix, got shape {P.shape}.")
    return P


def affine_values(domain: DomainMask, P):
    """Nodal values of ``x ↦ Px``."""
    return domain.grid.node_coordinates @ _as_matrix(P).T


class DirichletCellProblem:
    """
    Minimize ``⨏ ½∇ν·A∇ν`` (plus ``½λ₀(∇·ν)²`` when unconstrained) over ``ν ∈ Px + H¹₀``, with ``∇·ν = Tr P`` when
    constrained. The system is factorized once and reused for every ``P``.
    """

    def __init__(self, field: CoefficientField, domain: DomainMask, constrained=True, lambda0=0.0, settings=None):
        if lambda0 < 0:
            raise ValueError(f"lambda0 must be nonnegative, got {lambda0!r}.")
        self.domain = domain
        self.constrained = constrained
        self.lambda0 = 0.0 if constrained else float(lambda0)
        self.settings = settings
        self.operator = assemble_penalized_elasticity(field, self.lambda0, domain)
        free = domain.free_dofs
        if constrained:
            self.system = SaddleSystem(
                block(self.operator.stiffness, free, free), self.operator.free_divergence, self.operator.labels, settings, stage='dirichlet corrector'
            )
        else:
            self.system = LinearSystem(self.operator.matrix, settings, definite=True, stage='dirichlet corrector')
        self._projector = None

    def __repr__(self):
        mode = 'constrained' if self.constrained else f"lambda0={self.lambda0!r}"
        return f"DirichletCellProblem({self.domain!r}, {mode})"

    def solve(self, P):
        P = _as_matrix(P)
        domain = self.domain
        lift = lift_boundary_data(domain, affine_values(domain, P))
        free = domain.free_dofs
        pressure = None
        if self.constrained:
            rhs_velocity = -(self.operator.stiffness @ lift.ravel())[free]
            rhs_pressure = domain.element_area * np.trace(P) - self.operator.divergence @ lift.ravel()
            velocity, multiplier, residual = self.system.solve(rhs_velocity, rhs_pressure)
            pressure = DiscreteScalarField(multiplier, domain)
        else:
            velocity, residual = self.system.solve(-(self.operator.full_matrix @ lift.ravel())[free])
        corrector = _assemble_field(domain, velocity, lift, residual)
        energy, centered = self.energies(corrector.flat, np.trace(P))
        logger_for_cell.debug("%r at P=%r: energy %r.", self, P.tolist(), energy)
        return CorrectorSolution(corrector, pressure, energy, centered)

    def energies(self, values, trace):
        """Averaged energy of a nodal vector and the same energy with ``½λ₀Tr(P)²`` removed."""
        domain = self.domain
        elastic = 0.5 * float(values @ (self.operator.stiffness @ values)) / domain.area
        if not self.lambda0:
            return elastic, elastic
        field = DiscreteVectorField(values.reshape(-1, 2), domain)
        divergence = discrete_divergence(field).values
        means = component_means(divergence, self.operator.labels)
        remainder = divergence - means
        penalty = 0.5 * self.lambda0 * (np.mean(remainder**2) + np.mean(means**2))
        centered = elastic + 0.5 * self.lambda0 * np.mean(remainder**2) + 0.5 * self.lambda0 * (np.mean(means**2) - trace**2)
        return elastic + penalty, centered

    def admissible_perturbation(self, generator):
        """
        A random interior perturbation; divergence-free in the discrete sense when constrained.
        """
        domain = self.domain
        free = domain.free_dofs
        bump = generator.standard_normal(free.size)
        if self.constrained:
            if self._projector is None:
                self._projector = SaddleSystem(
                    sparse.identity(free.size, format='csr'), self.operator.free_divergence, self.operator.labels, self.settings, stage='projection'
                )
            bump, _, _ = self._projector.solve(bump, np.zeros(domain.active_elements.size))
        values = np.zeros(2 * domain.grid.node_count)
        values[free] = bump
        return values


class NeumannCellProblem:
    """
    Maximize ``⨏ (-½∇w·A∇w + Q·∇w)`` over discretely divergence-free ``w`` without boundary conditions.

    The first active node is pinned to remove translations.
    """

    def __init__(self, field: CoefficientField, domain: DomainMask, settings=None):
        self.domain = domain
        self.operator = assemble_penalized_elasticity(field, 0.0, domain)
        nodes = domain.active_nodes[1:]
        free_nodes = np.zeros(domain.grid.node_count, dtype=bool)
        free_nodes[nodes] = True
        self.free = np.stack([2 * nodes, 2 * nodes + 1], axis=1).ravel()
        self.labels = pressure_kernel_labels(domain, free_nodes)
        divergence = self.operator.divergence[:, self.free]
        self.system = SaddleSystem(
            block(self.operator.stiffness, self.free, self.free), divergence, self.labels, settings, stage='neumann corrector'
        )
        elements = domain.active_elements
        # ∫_e Q·∇φ over local dofs is (h/4) Σ_q G_REF[q]ᵀ Q.
        self._gradient_sum = 0.25 * domain.spacing * G_REF.sum(axis=0).T
        self._dofs = element_dofs(domain, elements)

    def __repr__(self):
        return f"NeumannCellProblem({self.domain!r})"

    def linear_term(self, Q):
        local = np.broadcast_to(self._gradient_sum @ _as_matrix(Q).ravel(), (len(self._dofs), 8))
        return assemble_vector(self._dofs, local, 2 * self.domain.grid.node_count)

    def solve(self, Q):
        domain = self.domain
        linear = self.linear_term(Q)
        velocity, pressure, residual = self.system.solve(linear[self.free], np.zeros(domain.active_elements.size))
        values = np.zeros(2 * domain.grid.node_count)
        values[self.free] = velocity
        stiffness = self.operator.stiffness
        value = (-0.5 * float(values @ (stiffness @ values)) + float(linear @ values)) / domain.area
        logger_for_cell.debug("%r at Q=%r: value %r.", self, _as_matrix(Q).tolist(), value)
        return NeumannSolution(DiscreteVectorField(values.reshape(-1, 2), domain, residual), DiscreteScalarField(pressure, domain), value)


def solve_dirichlet_corrector(field, cube, P, constrained=True, lambda0=0.0, settings=None):
    return DirichletCellProblem(field, cube, constrained, lambda0, settings).solve(P)


def solve_neumann_corrector(field, cube, Q, settings=None):
    return NeumannCellProblem(field, cube, settings).solve(Q)


class LambdaRate(NamedTuple):
    lambdas: np.ndarray
    errors: np.ndarray
    slope: float


def lambda_rate(field, domain, f=None, F=None, lambdas=(1e2, 1e3, 1e4), settings=None):
    """
    ``‖∇(u_λ - v₀)‖`` over ``lambdas``, with ``v₀`` the first expansion term, and its fitted log-log slope.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    operator = assemble_penalized_elasticity(field, 0.0, domain)
    free = domain.free_dofs
    lift = lift_boundary_data(domain, f)
    saddle = SaddleSystem(block(operator.stiffness, free, free), operator.free_divergence, operator.labels, settings, stage='first term')
    rhs_velocity = (operator.volume_load(F) - operator.stiffness @ lift.ravel())[free]
    rhs_pressure = domain.element_area * compatible_divergence(f, domain).values - operator.divergence @ lift.ravel()
    velocity, _, residual = saddle.solve(rhs_velocity, rhs_pressure)
    first = _assemble_field(domain, velocity, lift, residual)
    norm = _gradient_norm(vector_laplacian(domain))
    errors = np.array([norm(solve_elasticity_dirichlet(field, value, domain, f, F, settings).flat - first.flat) for value in lambdas])
    slope = linregress(np.log(lambdas), np.log(errors)).slope if lambdas.size > 1 and np.all(errors > 0) else math.nan
    logger_for_solve.info("Lambda rate over %s: slope %r.", lambdas.tolist(), slope)
    return LambdaRate(lambdas, errors, float(slope))


def write_solution_csv(path, u: DiscreteVectorField):
    path = Path(path)
    with path.open('w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(['node', 'x1', 'x2', 'u1', 'u2'])
        for node, ((x1, x2), (u1, u2)) in enumerate(zip(u.mask.grid.node_coordinates, u.values)):
            writer.writerow([node, repr(float(x1)), repr(float(x2)), repr(float(u1)), repr(float(u2))])
    logger_for_export.info("Wrote solution to %s.", path)
    return path


def write_residual_history(path, history):
    path = Path(path)
    with path.open('w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(['iteration', 'residual'])
        for iteration, residual in enumerate(history):
            writer.writerow([iteration, repr(float(residual))])
    logger_for_export.info("Wrote %s residuals to %s.", len(history), path)
    return path
