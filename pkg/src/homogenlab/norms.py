"""
Averaged norms, the scale-invariant dual norm and the excess functionals.

The dual norm of ``g`` is the dual of ``N(v)² = |D|⁻¹⨏v² + ⨏|∇v|²`` over ``v ∈ H¹₀(D)``, computed through the Riesz
problem ``(|D|⁻¹M + L)w = b``; it is within a factor ``√2`` of the dual of the sum norm.
"""
import csv
import math
from logging import getLogger
from pathlib import Path
from typing import NamedTuple
from typing import Optional

import numpy as np
from scipy import sparse

from . import NotASolution
from . import UnderResolved
from .geometry import ANNULI_LADDER
from .geometry import BumpyDomain
from .geometry import DomainMask
from .geometry import ball_levelset
from .geometry import build_ball_mask
from .geometry import large_scale_normal
from .grid import GAUSS_POINTS
from .grid import DiscreteScalarField
from .grid import DiscreteVectorField
from .grid import block
from .grid import discrete_divergence
from .grid import lift_boundary_data
from .grid import scalar_matrices
from .solve import LinearSystem

logger_for_excess = getLogger(f"{__name__}.excess")
logger_for_caccioppoli = getLogger(f"{__name__}.caccioppoli")

# Solutions must carry a relative residual below this to enter a Caccioppoli ratio.
SOLUTION_TOLERANCE = 1e-6
# Excess balls need this many elements per radius.
MIN_ELEMENTS_PER_RADIUS = 8


def gauss_points(mask: DomainMask, elements):
    reference = mask.grid.node_coordinates[mask.grid.element_nodes[elements, 0]]
    return reference[:, None, :] + mask.spacing * GAUSS_POINTS[None, :, :]


def mean_square(u: DiscreteVectorField, elements):
    """``⨏|u|²`` over the given elements (2×2 Gauss)."""
    return float(np.mean(np.sum(u.gauss_values(elements) ** 2, axis=-1)))


def gradient_mean_square(u: DiscreteVectorField, elements):
    """``⨏|∇u|²`` over the given elements (2×2 Gauss)."""
    return float(np.mean(np.sum(u.gauss_gradients(elements) ** 2, axis=-1)))


class HMinusOneProblem:
    """
    Riesz map of the scale-invariant ``H¹₀`` norm on ``domain``, factorized once.

    :param domain: the mask; data lives on its active elements (or nodes with ``nodal=True``).
    """

    def __init__(self, domain: DomainMask, settings=None):
        self.domain = domain
        self.area = domain.area
        stiffness, mass = scalar_matrices(domain)
        self.mass = mass
        self.free = domain.interior_nodes
        matrix = block((mass / self.area + stiffness).tocsr(), self.free, self.free)
        self.system = LinearSystem(matrix, settings, definite=True, stage='riesz')
        elements = domain.active_elements
        corners = domain.grid.element_nodes[elements].ravel()
        rows = corners
        cols = np.repeat(np.arange(len(elements)), 4)
        # ∫_e g φ_a = g h²/4 for an element-constant g.
        self.load = sparse.csr_matrix(
            (np.full(corners.size, 0.25 * domain.element_area), (rows, cols)), shape=(domain.grid.node_count, len(elements))
        )

    def __repr__(self):
        return f"HMinusOneProblem({self.domain!r})"

    def _loads(self, g, nodal):
        g = np.asarray(g.values if isinstance(g, DiscreteScalarField) else g, dtype=float)
        return (self.mass @ g if nodal else self.load @ g)[self.free]

    def riesz(self, g, nodal=False):
        """Riesz representative ``w`` (interior-node values) of the data ``g``."""
        solution, _ = self.system.solve(self._loads(g, nodal))
        return solution

    def pairing(self, g1, g2, nodal=False):
        """``⨏ g₁ R(g₂)``."""
        return float(self._loads(g1, nodal) @ self.riesz(g2, nodal)) / self.area

    def dual(self, g, nodal=False):
        """
        Dual norm of ``g``; a 2-d array is read as several components and gives the Euclidean combination.
        """
        g = np.asarray(g.values if isinstance(g, DiscreteScalarField) else g, dtype=float)
        if g.ndim == 2:
            return math.sqrt(sum(self.dual(g[:, k], nodal) ** 2 for k in range(g.shape[1])))
        loads = self._loads(g, nodal)
        if not np.any(loads):
            return 0.0
        solution, _ = self.system.solve(loads)
        return math.sqrt(max(float(loads @ solution), 0.0) / self.area)


def dual_h_minus1(g, domain: DomainMask, nodal=False):
    return HMinusOneProblem(domain).dual(g, nodal)


def average_flux(f, domain: DomainMask, lift=None):
    """
    ``⟨f⟩_D``: the integral of the discrete divergence of a lift of ``f``, divided by ``|D|``.

    :param lift: any nodal field (``(nodes, 2)`` array) equal to ``f`` on the Dirichlet nodes; defaults to the
        zero-extension of ``f``.
    """
    values = lift_boundary_data(domain, f) if lift is None else np.asarray(lift, dtype=float)
    divergence = discrete_divergence(DiscreteVectorField(values, domain))
    return float(divergence.values.sum()) * domain.element_area / domain.area


class ExcessReport(NamedTuple):
    """
    Excess quantities at scale ``t``: ``phi = flatness_phi + pressure_hm1 + pressure_sup`` and
    ``h_excess = flatness_h + pressure_hm1 + pressure_sup``.

    ``slope`` is the minimizing matrix ``M`` (interior) or vector ``q`` (boundary).
    """

    t: float
    phi: float
    h_excess: float
    slope: np.ndarray
    slope_norm: float
    flatness_phi: float
    flatness_h: float
    pressure_hm1: float
    pressure_sup: float

    @property
    def terms(self):
        return self.flatness_phi, self.pressure_hm1, self.pressure_sup


def _pressure_on_grid(pressure: Optional[DiscreteScalarField], mask: DomainMask):
    if pressure is None:
        return np.zeros(mask.grid.element_count)
    return pressure.on_grid()


def _element_distances(mask: DomainMask, elements, center):
    offsets = mask.grid.element_centers[elements] - np.asarray(center, dtype=float)
    return np.hypot(offsets[:, 0], offsets[:, 1])


def _sup_oscillation(values, mask: DomainMask, elements, center, t):
    """``max - min`` of ``⨏_{B_{kt}}`` averages over the annuli ladder ``k ∈ [1/4, 1]``."""
    distances = _element_distances(mask, elements, center)
    averages = []
    for k in ANNULI_LADDER:
        chosen = distances < k * t
        if chosen.any():
            averages.append(values[elements[chosen]].mean())
    return float(max(averages) - min(averages)) if averages else 0.0


def _pressure_terms(pressure_grid, ball: DomainMask, elements, center, t):
    centered = pressure_grid[ball.active_elements] - pressure_grid[elements].mean()
    hm1 = HMinusOneProblem(ball).dual(centered) / t
    return hm1, _sup_oscillation(pressure_grid, ball, elements, center, t)


def _check_scale(mask: DomainMask, t):
    if t < MIN_ELEMENTS_PER_RADIUS * mask.spacing * (1 - 1e-12):
        raise UnderResolved(f"Scale {t!r} is below {MIN_ELEMENTS_PER_RADIUS}h = {MIN_ELEMENTS_PER_RADIUS * mask.spacing!r}.")


def _ball_inside(mask: DomainMask, center, t):
    ball = build_ball_mask(None, center, t, grid=mask.grid)
    if np.any(mask.active_index[ball.active_elements] < 0):
        raise ValueError(f"B_{t}({tuple(center)}) is not inside {mask!r}.")
    return ball


def interior_excess(u: DiscreteVectorField, pressure: Optional[DiscreteScalarField], center, t):
    """
    ``Φ(t)`` and ``H(t)`` of ``(u, λ∇·u)`` on ``B_t(center)``.
    """
    mask = u.mask
    _check_scale(mask, t)
    center = np.asarray(center, dtype=float)
    ball = _ball_inside(mask, center, t)
    elements = ball.inside_elements
    values = u.gauss_values(elements).reshape(-1, 2)
    points = gauss_points(mask, elements).reshape(-1, 2) - center
    flatness_phi = math.sqrt(np.mean(np.sum((values - values.mean(axis=0)) ** 2, axis=1))) / t
    design = np.column_stack([points, np.ones(len(points))])
    coefficients, *_ = np.linalg.lstsq(design, values, rcond=None)
    remainder = values - design @ coefficients
    flatness_h = min(math.sqrt(np.mean(np.sum(remainder**2, axis=1))) / t, flatness_phi)
    slope = coefficients[:2].T
    hm1, sup = _pressure_terms(_pressure_on_grid(pressure, mask), ball, elements, center, t)
    report = ExcessReport(
        float(t), flatness_phi + hm1 + sup, flatness_h + hm1 + sup, slope, float(np.linalg.norm(slope)), flatness_phi, flatness_h, hm1, sup
    )
    logger_for_excess.debug("Interior excess at t=%r: phi=%r, H=%r.", t, report.phi, report.h_excess)
    return report


def boundary_excess(u: DiscreteVectorField, pressure: Optional[DiscreteScalarField], domain: BumpyDomain, t, normal=None):
    """
    Boundary ``Φ(t)`` and ``H(t)`` on ``D_t = D ∩ B_t``, with flatness competitors ``(n_t·x)q``.

    :param normal: ``n_t``; computed with :func:`~homogenlab.geometry.large_scale_normal` when omitted.
    """
    mask = u.mask
    _check_scale(mask, t)
    params = domain.params
    if not params.epsilon < t <= params.r0:
        raise ValueError(f"Scale {t!r} must lie in (epsilon, r0] = ({params.epsilon!r}, {params.r0!r}].")
    normal = large_scale_normal(domain, t) if normal is None else np.asarray(normal, dtype=float)
    center = np.zeros(2)
    part = mask.intersect(ball_levelset(center, t), f"D_{t:g}")
    elements = part.inside_elements
    values = u.gauss_values(elements).reshape(-1, 2)
    heights = gauss_points(mask, elements).reshape(-1, 2) @ normal
    flatness_phi = math.sqrt(np.mean(np.sum(values**2, axis=1))) / t
    denominator = float(heights @ heights)
    slope = heights @ values / denominator if denominator > 0 else np.zeros(2)
    remainder = values - np.outer(heights, slope)
    flatness_h = min(math.sqrt(np.mean(np.sum(remainder**2, axis=1))) / t, flatness_phi)
    hm1, sup = _pressure_terms(_pressure_on_grid(pressure, mask), part, elements, center, t)
    report = ExcessReport(
        float(t), flatness_phi + hm1 + sup, flatness_h + hm1 + sup, slope, float(np.linalg.norm(slope)), flatness_phi, flatness_h, hm1, sup
    )
    logger_for_excess.debug("Boundary excess at t=%r: phi=%r, H=%r.", t, report.phi, report.h_excess)
    return report


def excess_ladder(u, pressure, scales, center=(0.0, 0.0), domain: Optional[BumpyDomain] = None):
    """
    Excess reports over ``scales``; under-resolved scales are skipped. Uses the boundary variant when ``domain`` is
    given.
    """
    reports = []
    for t in scales:
        try:
            if domain is None:
                reports.append(interior_excess(u, pressure, center, t))
            else:
                reports.append(boundary_excess(u, pressure, domain, t))
        except UnderResolved as exc:
            logger_for_excess.warning("Skipping scale %r: %s", t, exc)
    return reports


EXCESS_COLUMNS = ('t', 'phi', 'h_excess', 'term1', 'term2', 'term3', 'slope_norm')


def write_excess_csv(path, reports):
    path = Path(path)
    with path.open('w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(EXCESS_COLUMNS)
        for report in reports:
            row = (report.t, report.phi, report.h_excess, *report.terms, report.slope_norm)
            writer.writerow([repr(float(value)) for value in row])
    return path


def _region(mask: DomainMask, center, radius, boundary):
    if boundary:
        return mask.intersect(ball_levelset(center, radius), f"D_{radius:g}")
    return _ball_inside(mask, center, radius)


def caccioppoli_residual(u: DiscreteVectorField, pressure: Optional[DiscreteScalarField], center, r, boundary=False):
    """
    Ratio of the two sides of the generalized Caccioppoli inequality on ``B_r`` against ``B_{2r}``.

    Left: ``⨏_{B_r}|∇u|² + ⨏_{B_r}|π - ⨏_{B_r}π|²``. Right: ``r⁻²inf_q⨏_{B_2r}|u - q|²`` (``q = 0`` for the
    boundary variant) ``+ r⁻²‖π - ⨏π‖²_{H⁻¹(B_2r)}`` plus the squared annuli oscillation of ``π`` on ``B_2r``.
    """
    if u.residual is None or u.residual > SOLUTION_TOLERANCE:
        raise NotASolution(f"Field is not a solved field (residual {u.residual!r}).")
    mask = u.mask
    center = np.asarray(center, dtype=float)
    _check_scale(mask, r)
    inner = _region(mask, center, r, boundary)
    outer = _region(mask, center, 2 * r, boundary)
    pressure_grid = _pressure_on_grid(pressure, mask)
    inner_elements = inner.inside_elements
    outer_elements = outer.inside_elements
    inner_pressure = pressure_grid[inner_elements]
    left = gradient_mean_square(u, inner_elements) + float(np.mean((inner_pressure - inner_pressure.mean()) ** 2))
    values = u.gauss_values(outer_elements).reshape(-1, 2)
    if not boundary:
        values = values - values.mean(axis=0)
    flatness = float(np.mean(np.sum(values**2, axis=1))) / r**2
    hm1, sup = _pressure_terms(pressure_grid, outer, outer_elements, center, 2 * r)
    # _pressure_terms divides by the radius 2r; rescale to 1/r.
    right = flatness + (2 * hm1) ** 2 + sup**2
    if left <= np.finfo(float).tiny:
        return 0.0
    ratio = left / right if right > 0 else math.inf
    logger_for_caccioppoli.debug("Caccioppoli ratio at r=%r: %r.", r, ratio)
    return ratio


def interpolation_ratio(F: DiscreteScalarField, center, r, theta):
    """
    ``|⨏_{B_θr}F|³ / (r⁻¹‖F‖_{H⁻¹(B_r)} ⨏_{B_r}|F|²)``.
    """
    if not 0 < theta < 1:
        raise ValueError(f"theta must lie in (0, 1), got {theta!r}.")
    mask = F.mask
    ball = _ball_inside(mask, center, r)
    values = F.on_grid()
    elements = ball.inside_elements
    small = elements[_element_distances(mask, elements, center) < theta * r]
    if not small.size:
        raise UnderResolved(f"No element center within {theta * r!r} of {tuple(center)}.")
    numerator = abs(values[small].mean()) ** 3
    denominator = HMinusOneProblem(ball).dual(values[ball.active_elements]) / r * float(np.mean(values[elements] ** 2))
    if numerator == 0:
        return 0.0
    return numerator / denominator if denominator > 0 else math.inf
