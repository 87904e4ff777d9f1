"""
Discrete domains on uniform grids.

A :class:`DomainMask` classifies the nodes and elements of a :class:`Grid` from a level set (negative inside).
Nodes strictly inside are ``interior`` (free unknowns). The remaining corners of elements touching an interior
node are ``dirichlet`` (boundary data is imposed there, stair-step style). Everything else is ``exterior``.
"""
import csv
import math
from dataclasses import dataclass
from functools import cached_property
from logging import getLogger
from pathlib import Path
from typing import Callable
from typing import NamedTuple
from typing import Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from . import GeometryError
from . import UnderResolved

logger_for_mask = getLogger(f"{__name__}.mask")
logger_for_normal = getLogger(f"{__name__}.normal")
logger_for_caps = getLogger(f"{__name__}.caps")

INTERIOR, DIRICHLET, EXTERIOR = 0, 1, 2
INSIDE, CUT, OUTSIDE = 0, 1, 2
NODE_CLASS_NAMES = ('interior', 'dirichlet', 'exterior')
ELEMENT_CLASS_NAMES = ('inside', 'boundary-cut', 'outside')

# Relative (to h) margin a level set must clear for a node to count as strictly inside.
STRICT_MARGIN = 1e-10

# Step of the ladder used for the sup over k, l ∈ [1/4, 1].
ANNULI_LADDER = tuple(0.25 + step / 16 for step in range(13))


@dataclass(frozen=True)
class Grid:
    """
    Uniform grid of square bilinear elements.

    Node ``(i, j)`` has index ``j * (nx + 1) + i`` and sits at ``origin + (i, j) * spacing``. Element ``(i, j)`` has
    index ``j * nx + i`` and corners ``(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)`` in that order.
    """

    origin: Tuple[float, float]
    spacing: float
    shape: Tuple[int, int]

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing!r}.")
        nx, ny = self.shape
        if nx < 1 or ny < 1:
            raise ValueError(f"shape must be positive, got {self.shape!r}.")
        object.__setattr__(self, 'origin', (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, 'spacing', float(self.spacing))
        object.__setattr__(self, 'shape', (int(nx), int(ny)))

    @classmethod
    def covering(cls, center, half_extent, spacing, padding=2):
        """
        Square grid centered at ``center`` (a node) reaching at least ``half_extent`` plus ``padding`` elements.
        """
        steps = math.ceil(half_extent / spacing - 1e-9) + padding
        origin = (center[0] - steps * spacing, center[1] - steps * spacing)
        return cls(origin, spacing, (2 * steps, 2 * steps))

    @property
    def node_count(self):
        nx, ny = self.shape
        return (nx + 1) * (ny + 1)

    @property
    def element_count(self):
        nx, ny = self.shape
        return nx * ny

    @cached_property
    def node_coordinates(self):
        nx, ny = self.shape
        i, j = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
        points = np.stack([self.origin[0] + i.ravel() * self.spacing, self.origin[1] + j.ravel() * self.spacing], axis=1)
        points.setflags(write=False)
        return points

    @cached_property
    def element_nodes(self):
        nx, ny = self.shape
        i, j = np.meshgrid(np.arange(nx), np.arange(ny))
        first = (j * (nx + 1) + i).ravel()
        nodes = np.stack([first, first + 1, first + nx + 2, first + nx + 1], axis=1)
        nodes.setflags(write=False)
        return nodes

    @cached_property
    def element_centers(self):
        centers = self.node_coordinates[self.element_nodes[:, 0]] + 0.5 * self.spacing
        centers.setflags(write=False)
        return centers

    @cached_property
    def node_elements(self):
        """
        Incident elements per node in the order SW, SE, NE, NW; ``-1`` where the grid ends.
        """
        nx, ny = self.shape
        i, j = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
        i, j = i.ravel(), j.ravel()
        result = np.full((self.node_count, 4), -1, dtype=np.int64)
        for column, (di, dj) in enumerate(((-1, -1), (0, -1), (0, 0), (-1, 0))):
            ei, ej = i + di, j + dj
            valid = (ei >= 0) & (ei < nx) & (ej >= 0) & (ej < ny)
            result[valid, column] = ej[valid] * nx + ei[valid]
        result.setflags(write=False)
        return result

    @cached_property
    def faces(self):
        """
        Element pairs sharing an edge with the two shared nodes: ``(left, right, node, node)`` for vertical edges
        and ``(below, above, node, node)`` for horizontal ones.
        """
        nx, ny = self.shape
        nodes = self.element_nodes
        i, j = np.meshgrid(np.arange(nx), np.arange(ny))
        element = (j * nx + i).ravel()
        has_right = i.ravel() < nx - 1
        has_above = j.ravel() < ny - 1
        left = element[has_right]
        below = element[has_above]
        vertical = np.stack([left, left + 1, nodes[left, 1], nodes[left, 2]], axis=1)
        horizontal = np.stack([below, below + nx, nodes[below, 3], nodes[below, 2]], axis=1)
        return vertical, horizontal

    def on_border(self, nodes):
        nx, ny = self.shape
        i = nodes % (nx + 1)
        j = nodes // (nx + 1)
        return (i == 0) | (j == 0) | (i == nx) | (j == ny)


def ball_levelset(center, radius):
    center = np.asarray(center, dtype=float)

    def levelset(points):
        return np.hypot(points[:, 0] - center[0], points[:, 1] - center[1]) - radius

    return levelset


def box_levelset(center, half_width):
    center = np.asarray(center, dtype=float)

    def levelset(points):
        return np.max(np.abs(points - center), axis=1) - half_width

    return levelset


def intersection(*levelsets):
    def levelset(points):
        return np.max([function(points) for function in levelsets], axis=0)

    return levelset


@dataclass(frozen=True, eq=False, repr=False)
class DomainMask:
    """
    Node and element classification of a :class:`Grid` by a level set.

    :param grid: the underlying grid.
    :param node_class: per node, one of ``INTERIOR``, ``DIRICHLET``, ``EXTERIOR``.
    :param element_class: per element, one of ``INSIDE``, ``CUT``, ``OUTSIDE``.
    :param levelset: callable, negative inside; kept so that sub-domains can be cut on the same grid.
    :param name: label used in logs and exports.
    """

    grid: Grid
    node_class: np.ndarray
    element_class: np.ndarray
    levelset: Callable
    name: str = 'domain'

    @classmethod
    def from_levelset(cls, grid: Grid, levelset, name='domain'):
        nodes_inside = levelset(grid.node_coordinates) < -STRICT_MARGIN * grid.spacing
        if not nodes_inside.any():
            raise UnderResolved(f"Domain {name!r} has no interior node at h={grid.spacing!r}.")
        if grid.on_border(np.flatnonzero(nodes_inside)).any():
            raise ValueError(f"Domain {name!r} reaches the border of {grid!r}; use a larger grid.")
        element_nodes = grid.element_nodes
        active = nodes_inside[element_nodes].any(axis=1)
        touched = np.zeros(grid.node_count, dtype=bool)
        touched[element_nodes[active].ravel()] = True
        node_class = np.full(grid.node_count, EXTERIOR, dtype=np.int8)
        node_class[touched] = DIRICHLET
        node_class[nodes_inside] = INTERIOR
        centers_inside = levelset(grid.element_centers) < 0
        element_class = np.full(grid.element_count, OUTSIDE, dtype=np.int8)
        element_class[active & ~centers_inside] = CUT
        element_class[active & centers_inside] = INSIDE
        node_class.setflags(write=False)
        element_class.setflags(write=False)
        mask = cls(grid, node_class, element_class, levelset, name)
        logger_for_mask.debug(
            "Built %r: %s interior nodes, %s active elements.", mask, mask.interior_nodes.size, mask.active_elements.size
        )
        return mask

    def __repr__(self):
        return f"DomainMask({self.name!r}, h={self.spacing!r}, shape={self.grid.shape!r})"

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def element_area(self):
        return self.grid.spacing**2

    @cached_property
    def interior_nodes(self):
        return np.flatnonzero(self.node_class == INTERIOR)

    @cached_property
    def dirichlet_nodes(self):
        return np.flatnonzero(self.node_class == DIRICHLET)

    @cached_property
    def active_elements(self):
        return np.flatnonzero(self.element_class != OUTSIDE)

    @cached_property
    def inside_elements(self):
        return np.flatnonzero(self.element_class == INSIDE)

    @cached_property
    def active_index(self):
        """Position of each grid element among the active ones, ``-1`` if not active."""
        index = np.full(self.grid.element_count, -1, dtype=np.int64)
        index[self.active_elements] = np.arange(self.active_elements.size)
        return index

    @cached_property
    def free_dofs(self):
        return np.stack([2 * self.interior_nodes, 2 * self.interior_nodes + 1], axis=1).ravel()

    @cached_property
    def dirichlet_dofs(self):
        return np.stack([2 * self.dirichlet_nodes, 2 * self.dirichlet_nodes + 1], axis=1).ravel()

    @cached_property
    def active_nodes(self):
        return np.flatnonzero(self.node_class != EXTERIOR)

    @property
    def area(self):
        """Area of all active (inside and boundary-cut) elements, the discrete ``|D|``."""
        return self.active_elements.size * self.element_area

    @property
    def inside_area(self):
        return self.inside_elements.size * self.element_area

    @property
    def bounding_box(self):
        points = self.grid.node_coordinates[self.active_nodes]
        return tuple(points.min(axis=0)), tuple(points.max(axis=0))

    @property
    def active_centers(self):
        return self.grid.element_centers[self.active_elements]

    def element_labels(self, elements):
        """Face-connected components of a set of grid elements."""
        vertical, horizontal = self.grid.faces
        chosen = np.zeros(self.grid.element_count, dtype=bool)
        chosen[elements] = True
        pairs = np.concatenate([vertical[:, :2], horizontal[:, :2]])
        pairs = pairs[chosen[pairs[:, 0]] & chosen[pairs[:, 1]]]
        position = np.full(self.grid.element_count, -1, dtype=np.int64)
        position[elements] = np.arange(len(elements))
        rows, cols = position[pairs[:, 0]], position[pairs[:, 1]]
        graph = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(elements), len(elements)))
        return connected_components(graph, directed=False)

    def is_connected(self):
        count, _ = self.element_labels(self.inside_elements)
        return count == 1

    def intersect(self, levelset, name=None):
        """
        The sub-domain ``{self.levelset < 0} ∩ {levelset < 0}`` on the same grid.
        """
        return DomainMask.from_levelset(self.grid, intersection(self.levelset, levelset), name or f"{self.name}∩")

    def elements_within(self, center, radius, elements=None):
        """Active elements (or the given ones) whose center lies strictly within ``radius`` of ``center``."""
        elements = self.active_elements if elements is None else elements
        offsets = self.grid.element_centers[elements] - np.asarray(center, dtype=float)
        return elements[np.hypot(offsets[:, 0], offsets[:, 1]) < radius]

    def export_csv(self, path):
        path = Path(path)
        with path.open('w', newline='') as fh:
            writer = csv.writer(fh)
            writer.writerow(['node', 'x1', 'x2', 'class'])
            for node, (x1, x2) in enumerate(self.grid.node_coordinates):
                writer.writerow([node, repr(float(x1)), repr(float(x2)), NODE_CLASS_NAMES[self.node_class[node]]])
        return path


def build_ball_mask(h, center, r, grid=None):
    """
    Discrete ball ``B_r(center)``.

    :param h: grid spacing (ignored when ``grid`` is given).
    :param center: ball center.
    :param r: radius, at least ``4h``.
    :param grid: reuse an existing grid so that masks can be compared node by node.
    """
    h = grid.spacing if grid is not None else h
    if r < 4 * h * (1 - 1e-12):
        raise UnderResolved(f"Ball radius {r!r} is below 4h = {4 * h!r}.")
    grid = grid or Grid.covering(center, r, h)
    return DomainMask.from_levelset(grid, ball_levelset(center, r), f"B_{r:g}")


def build_box_mask(h, center, half_width, grid=None):
    h = grid.spacing if grid is not None else h
    if half_width < 2 * h * (1 - 1e-12):
        raise UnderResolved(f"Box half width {half_width!r} is below 2h = {2 * h!r}.")
    grid = grid or Grid.covering(center, half_width, h)
    return DomainMask.from_levelset(grid, box_levelset(center, half_width), f"box_{half_width:g}")


def build_cube_mask(level, elements_per_cell=8, center=(0.0, 0.0)):
    """
    Triadic cube ``(-3^m/2, 3^m/2)²`` resolved by ``elements_per_cell`` elements per unit cell.

    Every element is inside and every node on the cube's boundary is a Dirichlet node.
    """
    if level < 0:
        raise ValueError(f"level must be nonnegative, got {level!r}.")
    if elements_per_cell < 1:
        raise ValueError(f"elements_per_cell must be positive, got {elements_per_cell!r}.")
    side = 3**level
    count = side * elements_per_cell
    grid = Grid((center[0] - 0.5 * side, center[1] - 0.5 * side), 1.0 / elements_per_cell, (count, count))
    return DomainMask.from_levelset(grid, box_levelset(center, 0.5 * side), f"cube_{level}")


def zeta(t, epsilon, alpha=0.5):
    """``ζ_α(t, ε) = t^α + (ε/t)^α``."""
    return t**alpha + (epsilon / t) ** alpha


@dataclass(frozen=True)
class BumpyDomainParams:
    """
    Graph domain ``{x ∈ B_radius : x₂ > ψ(x₁)}`` with ``ψ(x₁) = ψ₀(x₁) + εψ₁(x₁/ε)``.

    ``ψ₀(x₁) = slope·x₁ + Σ_k a_k (cos(kπx₁/2) - 1) + b_k sin(kπx₁/2)`` with ``profile = ((a_1, b_1), ...)``, and
    ``ψ₁`` is piecewise linear with unit knot spacing and heights drawn uniformly in ``[-bump_amplitude, bump_amplitude]``.
    """

    epsilon: float
    alpha: float = 0.5
    slope: float = 0.0
    profile: Tuple[Tuple[float, float], ...] = ()
    bump_amplitude: float = 0.0
    lipschitz_bound: float = 1.0
    seed: int = 0
    radius: float = 2.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon!r}.")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha!r}.")
        if self.bump_amplitude < 0:
            raise ValueError(f"bump_amplitude must be nonnegative, got {self.bump_amplitude!r}.")
        if not self.lipschitz_bound > 0:
            raise ValueError(f"lipschitz_bound must be positive, got {self.lipschitz_bound!r}.")
        object.__setattr__(self, 'profile', tuple((float(a), float(b)) for a, b in self.profile))

    @property
    def r0(self):
        return 0.5 * self.radius


class BoundaryGraph:
    """
    The realized boundary function ``ψ``. Knot ``0`` has height ``0`` so that ``0 ∈ ∂D``.
    """

    def __init__(self, params: BumpyDomainParams):
        self.params = params
        reach = math.ceil(params.radius / params.epsilon) + 2
        self.knots = np.arange(-reach, reach + 1, dtype=float)
        generator = np.random.Generator(np.random.Philox(key=int(params.seed) & ((1 << 64) - 1)))
        heights = generator.uniform(-params.bump_amplitude, params.bump_amplitude, self.knots.size)
        middle = reach
        heights[middle] = 0.0
        bound = params.lipschitz_bound
        if 2 * params.bump_amplitude > bound:
            for k in range(middle + 1, heights.size):
                heights[k] = np.clip(heights[k], heights[k - 1] - bound, heights[k - 1] + bound)
            for k in range(middle - 1, -1, -1):
                heights[k] = np.clip(heights[k], heights[k + 1] - bound, heights[k + 1] + bound)
        self.heights = heights

    def smooth(self, x1):
        params = self.params
        x1 = np.asarray(x1, dtype=float)
        value = params.slope * x1
        for k, (a, b) in enumerate(params.profile, start=1):
            value = value + a * (np.cos(k * np.pi * x1 / 2) - 1) + b * np.sin(k * np.pi * x1 / 2)
        return value

    def bumps(self, x1):
        epsilon = self.params.epsilon
        return epsilon * np.interp(np.asarray(x1, dtype=float) / epsilon, self.knots, self.heights)

    def __call__(self, x1):
        return self.smooth(x1) + self.bumps(x1)

    @property
    def kink_positions(self):
        return self.knots * self.params.epsilon

    def bump_lipschitz(self):
        """Realized Lipschitz constant of ``ψ₁``."""
        return float(np.abs(np.diff(self.heights)).max()) if self.heights.size > 1 else 0.0


class BumpyDomain(NamedTuple):
    mask: DomainMask
    boundary: BoundaryGraph

    @property
    def params(self):
        return self.boundary.params


def build_bumpy_domain(params: BumpyDomainParams, h):
    """
    Discrete ``{x ∈ B₂ : x₂ > ψ(x₁)}``; nodes on or below the graph are Dirichlet or exterior.

    Returns ``(mask, ψ)``.
    """
    if h > params.epsilon / 4 * (1 + 1e-12):
        raise UnderResolved(f"Spacing {h!r} does not resolve bumps at epsilon={params.epsilon!r} (needs h ≤ ε/4).")
    boundary = BoundaryGraph(params)

    def below_graph(points):
        return boundary(points[:, 0]) - points[:, 1]

    grid = Grid.covering((0.0, 0.0), params.radius, h)
    levelset = intersection(ball_levelset((0.0, 0.0), params.radius), below_graph)
    return BumpyDomain(DomainMask.from_levelset(grid, levelset, 'bumpy'), boundary)


def boundary_samples(domain: BumpyDomain, t, disc=True):
    """
    Points ``(x₁, ψ(x₁))`` at the grid's node abscissae and the bump knots with ``|x₁| < t``; with ``disc`` only
    those inside ``B_t``.
    """
    grid = domain.mask.grid
    nx = grid.shape[0]
    abscissae = np.union1d(grid.origin[0] + np.arange(nx + 1) * grid.spacing, domain.boundary.kink_positions)
    abscissae = abscissae[np.abs(abscissae) < t]
    points = np.stack([abscissae, domain.boundary(abscissae)], axis=1)
    if disc:
        points = points[np.hypot(points[:, 0], points[:, 1]) < t]
    return points


def _check_scale(domain: BumpyDomain, t):
    params = domain.params
    if not params.epsilon < t <= params.r0:
        raise ValueError(f"Scale {t!r} must lie in (epsilon, r0] = ({params.epsilon!r}, {params.r0!r}].")


def large_scale_normal(domain: BumpyDomain, t):
    """
    Outward unit normal of the least-squares line through the boundary points in ``B_t``.
    """
    _check_scale(domain, t)
    points = boundary_samples(domain, t)
    if len(points) < 8:
        raise GeometryError(f"Only {len(points)} boundary points in B_{t}; need at least 8.")
    _, _, vt = np.linalg.svd(points - points.mean(axis=0), full_matrices=False)
    normal = vt[-1]
    # The domain lies above the graph.
    if normal[1] > 0:
        normal = -normal
    logger_for_normal.debug("Normal at t=%r: %r.", t, normal)
    return normal


def dyadic_scales(domain: BumpyDomain):
    params = domain.params
    scales = []
    t = params.r0
    while t > params.epsilon * (1 + 1e-12):
        scales.append(t)
        t /= 2
    return scales


def _sandwich_ratio(domain, t):
    normal = large_scale_normal(domain, t)
    deviation = np.abs(boundary_samples(domain, t, disc=False) @ normal).max()
    return deviation / (t * zeta(t, domain.params.epsilon, domain.params.alpha))


def sandwich_constant(domain: BumpyDomain, scales=None):
    """
    Smallest ``C₀`` with ``|x·n_t| ≤ C₀ t ζ(t, ε)`` for the boundary points over the scale ladder.
    """
    scales = dyadic_scales(domain) if scales is None else scales
    return max(_sandwich_ratio(domain, t) for t in scales)


def normal_drift(domain: BumpyDomain, scales=None):
    """
    Smallest ``C`` with ``|n_r - n_s| ≤ C r ζ(r, ε) / s`` over all ladder pairs ``s ≤ r``.
    """
    scales = sorted(dyadic_scales(domain) if scales is None else scales)
    normals = [large_scale_normal(domain, t) for t in scales]
    params = domain.params
    worst = 0.0
    for b, r in enumerate(scales):
        for a in range(b + 1):
            s = scales[a]
            drift = np.linalg.norm(normals[b] - normals[a])
            worst = max(worst, drift * s / (r * zeta(r, params.epsilon, params.alpha)))
    return worst


def cap_half_width(domain: BumpyDomain, t, c0=None):
    """``C₀ t ζ(t, ε)``, half the width of the slab between ``T_t^-`` and ``T_t^+``."""
    c0 = max(sandwich_constant(domain), _sandwich_ratio(domain, t)) if c0 is None else c0
    return c0 * t * zeta(t, domain.params.epsilon, domain.params.alpha)


def cap_domains(domain: BumpyDomain, t, c0=None):
    """
    Masks of ``T_t^- = {x·n_t < -C₀tζ} ∩ B_t`` and ``T_t^+ = {x·n_t < C₀tζ} ∩ B_t`` on the domain's grid.

    Raises :class:`GeometryError` unless ``T_t^- ⊆ D_t ⊆ T_t^+`` node-wise.
    """
    _check_scale(domain, t)
    normal = large_scale_normal(domain, t)
    width = cap_half_width(domain, t, c0)
    grid = domain.mask.grid
    ball = ball_levelset((0.0, 0.0), t)

    def half_plane(shift):
        return lambda points: points @ normal - shift

    minus = DomainMask.from_levelset(grid, intersection(ball, half_plane(-width)), f"T-_{t:g}")
    plus = DomainMask.from_levelset(grid, intersection(ball, half_plane(width)), f"T+_{t:g}")
    inner = domain.mask.intersect(ball, f"D_{t:g}")
    inside_minus = minus.node_class == INTERIOR
    inside_d = inner.node_class == INTERIOR
    inside_plus = plus.node_class == INTERIOR
    if np.any(inside_minus & ~inside_d) or np.any(inside_d & ~inside_plus):
        raise GeometryError(f"Cap inclusion T- ⊆ D_t ⊆ T+ fails at t={t!r} with half width {width!r}.")
    logger_for_caps.debug("Caps at t=%r: half width %r.", t, width)
    return minus, plus


def cap_area_ratio(domain: BumpyDomain, t, c0=None):
    """``|T_t^+ \\ T_t^-| / |D_t|`` in element-area measure."""
    minus, plus = cap_domains(domain, t, c0)
    inner = domain.mask.intersect(ball_levelset((0.0, 0.0), t))
    return (plus.inside_area - minus.inside_area) / inner.inside_area
