"""
Bilinear (Q1) vector elements with element-constant (P0) divergence on a :class:`~homogenlab.geometry.DomainMask`.

Degrees of freedom cover every grid node, ``dof = 2 * node + α``; only the interior ones are unknowns. The
``A``-term is integrated with 2×2 Gauss points, the constant ``λ₀`` term with the element center only, so that
the penalized matrix equals ``K + λ₀ BᵀW⁻¹B`` with ``B`` the divergence block and ``W = h² I``.
"""
from dataclasses import dataclass
from functools import cached_property
from logging import getLogger
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .coeff import CoefficientField
from .geometry import INTERIOR
from .geometry import DomainMask

logger_for_assembly = getLogger(f"{__name__}.assemble")
logger_for_export = getLogger(f"{__name__}.export")

# Pressure-jump stabilization coefficient, scaled by h².
STABILIZATION = 0.1

_OFFSET = 0.5 / np.sqrt(3.0)
GAUSS_POINTS = np.array(
    [
        (0.5 - _OFFSET, 0.5 - _OFFSET),
        (0.5 + _OFFSET, 0.5 - _OFFSET),
        (0.5 + _OFFSET, 0.5 + _OFFSET),
        (0.5 - _OFFSET, 0.5 + _OFFSET),
    ]
)


def _shape(xi, eta):
    return np.array([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta])


def _dshape(xi, eta):
    return np.array([[-(1 - eta), 1 - eta, eta, -eta], [-(1 - xi), -xi, xi, 1 - xi]])


SHAPE = np.array([_shape(xi, eta) for xi, eta in GAUSS_POINTS])
DSHAPE = np.array([_dshape(xi, eta) for xi, eta in GAUSS_POINTS])
CENTER_DSHAPE = _dshape(0.5, 0.5)

# G_REF[q] maps local dofs (2a + α) to the flattened gradient (2α + i) at Gauss point q, for unit spacing.
G_REF = np.zeros((4, 4, 8))
for _q in range(4):
    for _alpha in range(2):
        for _i in range(2):
            G_REF[_q, 2 * _alpha + _i, _alpha::2] = DSHAPE[_q, _i]

# Unit-spacing divergence at the element center over local dofs (2a + α).
DIVERGENCE_ROW = np.zeros(8)
for _alpha in range(2):
    DIVERGENCE_ROW[_alpha::2] = CENTER_DSHAPE[_alpha]

SCALAR_STIFFNESS = 0.25 * np.einsum('qia,qib->ab', DSHAPE, DSHAPE)
SCALAR_MASS = 0.25 * np.einsum('qa,qb->ab', SHAPE, SHAPE)

for _array in (GAUSS_POINTS, SHAPE, DSHAPE, CENTER_DSHAPE, G_REF, DIVERGENCE_ROW, SCALAR_STIFFNESS, SCALAR_MASS):
    _array.setflags(write=False)


def element_dofs(mask: DomainMask, elements):
    nodes = mask.grid.element_nodes[elements]
    return np.stack([2 * nodes, 2 * nodes + 1], axis=2).reshape(len(elements), 8)


def assemble(dofs, element_matrices, size):
    """
    Sum element matrices into a CSR matrix with a fixed (element order) reduction.

    Symmetric element matrices give an exactly symmetric result.
    """
    width = dofs.shape[1]
    rows = np.repeat(dofs, width, axis=1).ravel()
    cols = np.tile(dofs, (1, width)).ravel()
    keys, inverse = np.unique(rows * size + cols, return_inverse=True)
    data = np.bincount(inverse.ravel(), weights=np.asarray(element_matrices).ravel(), minlength=keys.size)
    return sparse.csr_matrix((data, (keys // size, keys % size)), shape=(size, size))


def assemble_vector(dofs, element_vectors, size):
    return np.bincount(dofs.ravel(), weights=np.asarray(element_vectors).ravel(), minlength=size)


def nodal_values(mask: DomainMask, function):
    """Evaluate ``function`` (points to ``(n, 2)`` values) at every grid node."""
    values = np.asarray(function(mask.grid.node_coordinates), dtype=float)
    if values.shape != (mask.grid.node_count, 2):
        raise ValueError(f"Boundary data must produce shape {(mask.grid.node_count, 2)}, got {values.shape}.")
    return values


def lift_boundary_data(mask: DomainMask, f=None):
    """
    Nodal field equal to ``f`` on the Dirichlet nodes and zero elsewhere.

    :param f: ``None`` (zero data), a callable on points, or an array of nodal values of shape ``(nodes, 2)``.
    """
    lift = np.zeros((mask.grid.node_count, 2))
    if f is None:
        return lift
    values = nodal_values(mask, f) if callable(f) else np.asarray(f, dtype=float)
    if values.shape != lift.shape:
        raise ValueError(f"Boundary data must have shape {lift.shape}, got {values.shape}.")
    lift[mask.dirichlet_nodes] = values[mask.dirichlet_nodes]
    return lift


@dataclass(frozen=True, eq=False)
class DiscreteVectorField:
    """
    Nodal displacement or velocity.

    :param values: array of shape ``(nodes, 2)``; non-interior nodes carry the boundary data.
    :param mask: the domain the field lives on.
    :param residual: relative residual of the solve that produced it, ``None`` for data that was not solved for.
    """

    values: np.ndarray
    mask: DomainMask
    residual: Optional[float] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.mask.grid.node_count, 2):
            raise ValueError(f"values must have shape {(self.mask.grid.node_count, 2)}, got {values.shape}.")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @classmethod
    def interpolate(cls, mask: DomainMask, function):
        """Nodal interpolant of ``function`` on active nodes, zero elsewhere."""
        values = np.zeros((mask.grid.node_count, 2))
        values[mask.active_nodes] = nodal_values(mask, function)[mask.active_nodes]
        return cls(values, mask)

    @property
    def flat(self):
        return self.values.ravel()

    def __add__(self, other):
        return DiscreteVectorField(self.values + other.values, self.mask)

    def __sub__(self, other):
        return DiscreteVectorField(self.values - other.values, self.mask)

    def scaled(self, factor):
        return DiscreteVectorField(factor * self.values, self.mask)

    def local(self, elements):
        """Local dof values ``(elements, 8)`` in the order ``2a + α``."""
        return self.values[self.mask.grid.element_nodes[elements]].reshape(len(elements), 8)

    def gauss_values(self, elements):
        return np.einsum('qa,eac->eqc', SHAPE, self.values[self.mask.grid.element_nodes[elements]])

    def gauss_gradients(self, elements):
        """Flattened gradients ``(elements, 4, 4)`` at the Gauss points."""
        return np.einsum('qkl,el->eqk', G_REF, self.local(elements)) / self.mask.spacing


@dataclass(frozen=True, eq=False)
class DiscreteScalarField:
    """
    Element-constant pressure or divergence, one value per active element of ``mask``.
    """

    values: np.ndarray
    mask: DomainMask

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.mask.active_elements.size,):
            raise ValueError(f"values must have shape {(self.mask.active_elements.size,)}, got {values.shape}.")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    def mean(self):
        return float(self.values.mean())

    def centered(self):
        return DiscreteScalarField(self.values - self.values.mean(), self.mask)

    def on_grid(self):
        """Values over all grid elements, zero outside the domain."""
        values = np.zeros(self.mask.grid.element_count)
        values[self.mask.active_elements] = self.values
        return values

    def __add__(self, other):
        return DiscreteScalarField(self.values + other.values, self.mask)

    def __sub__(self, other):
        return DiscreteScalarField(self.values - other.values, self.mask)

    def scaled(self, factor):
        return DiscreteScalarField(factor * self.values, self.mask)


class AssembledOperator:
    """
    Assembled blocks of the penalized elasticity or mixed Stokes system on one domain.

    :param domain: the mask.
    :param stiffness: ``A``-part over all grid dofs (including the variable ``b`` trace part).
    :param penalty: ``BᵀW⁻¹B`` over all grid dofs.
    :param divergence: ``B``, rows over active elements, with ``(Bu)_e = ∫_e ∇·u``.
    :param lambda0: constant penalty weight.
    :param tensors: per active element 4×4 tensors used for the ``A``-part.
    :param stabilization: pressure-jump matrix ``S`` over active elements, if any.
    """

    def __init__(self, domain: DomainMask, stiffness, penalty, divergence, lambda0, tensors, stabilization=None):
        self.domain = domain
        self.stiffness = stiffness
        self.penalty = penalty
        self.divergence = divergence
        self.lambda0 = lambda0
        self.tensors = tensors
        self.stabilization = stabilization

    def __repr__(self):
        return f"AssembledOperator({self.domain!r}, lambda0={self.lambda0!r}, unknowns={self.domain.free_dofs.size})"

    @cached_property
    def full_matrix(self):
        if self.lambda0:
            return (self.stiffness + self.lambda0 * self.penalty).tocsr()
        return self.stiffness

    @cached_property
    def matrix(self):
        """The matrix over free (interior) unknowns."""
        return block(self.full_matrix, self.domain.free_dofs, self.domain.free_dofs)

    def apply(self, u: DiscreteVectorField):
        return self.full_matrix @ u.flat

    def volume_load(self, F=None):
        """Load vector over all dofs for volume data ``F`` in ``∇·(A∇u) + λ∇(∇·u) = F``."""
        size = 2 * self.domain.grid.node_count
        if F is None:
            return np.zeros(size)
        mask = self.domain
        elements = mask.active_elements
        reference = mask.grid.node_coordinates[mask.grid.element_nodes[elements, 0]]
        points = reference[:, None, :] + mask.spacing * GAUSS_POINTS[None, :, :]
        values = np.asarray(F(points.reshape(-1, 2)), dtype=float).reshape(len(elements), 4, 2)
        local = -0.25 * mask.element_area * np.einsum('qa,eqc->eac', SHAPE, values).reshape(len(elements), 8)
        return assemble_vector(element_dofs(mask, elements), local, size)

    def load(self, F=None, f=None):
        """
        Right-hand side over free unknowns and the boundary lift.

        :param F: volume data, callable on points.
        :param f: boundary data, see :func:`lift_boundary_data`.
        :returns: ``(rhs, lift)`` with ``lift`` a ``(nodes, 2)`` array.
        """
        lift = lift_boundary_data(self.domain, f)
        rhs = self.volume_load(F) - self.full_matrix @ lift.ravel()
        return rhs[self.domain.free_dofs], lift

    @cached_property
    def free_divergence(self):
        return self.divergence[:, self.domain.free_dofs].tocsr()

    @cached_property
    def labels(self):
        """Components of the spurious pressure kernel for the interior-node unknowns."""
        free = self.domain.node_class == INTERIOR
        return pressure_kernel_labels(self.domain, free)


def block(matrix, rows, cols):
    return matrix[rows][:, cols].tocsr()


def _element_tensors(field: CoefficientField, mask: DomainMask):
    return field.effective_tensors(mask.active_centers)


def _stiffness(mask: DomainMask, tensors):
    matrices = 0.25 * np.einsum('qia,eij,qjb->eab', G_REF, tensors, G_REF)
    matrices = 0.5 * (matrices + matrices.transpose(0, 2, 1))
    return assemble(element_dofs(mask, mask.active_elements), matrices, 2 * mask.grid.node_count)


def _penalty(mask: DomainMask):
    matrix = np.outer(DIVERGENCE_ROW, DIVERGENCE_ROW)
    matrices = np.broadcast_to(matrix, (mask.active_elements.size, 8, 8))
    return assemble(element_dofs(mask, mask.active_elements), matrices, 2 * mask.grid.node_count)


def _divergence(mask: DomainMask):
    count = mask.active_elements.size
    dofs = element_dofs(mask, mask.active_elements)
    data = np.broadcast_to(mask.spacing * DIVERGENCE_ROW, (count, 8))
    rows = np.repeat(np.arange(count), 8)
    return sparse.csr_matrix((data.ravel(), (rows, dofs.ravel())), shape=(count, 2 * mask.grid.node_count))


def _face_laplacian(mask: DomainMask):
    vertical, horizontal = mask.grid.faces
    pairs = np.concatenate([vertical[:, :2], horizontal[:, :2]])
    index = mask.active_index
    pairs = index[pairs]
    pairs = pairs[(pairs[:, 0] >= 0) & (pairs[:, 1] >= 0)]
    local = np.broadcast_to(np.array([[1.0, -1.0], [-1.0, 1.0]]), (len(pairs), 2, 2))
    return assemble(pairs, local, mask.active_elements.size)


def _check_domain(mask: DomainMask):
    if mask.interior_nodes.size == 0:
        raise ValueError(f"{mask!r} has an empty interior.")


def assemble_penalized_elasticity(field: CoefficientField, lambda0, domain: DomainMask):
    """
    Bilinear form ``∫ Ã∇u·∇w + λ₀ ∫ (∇·u)(∇·w)`` with ``Ã = A + (λ - field.lambda0)δδ``.

    :param field: must cover the domain; coefficients are sampled at element centers.
    :param lambda0: constant penalty weight (one-point quadrature).
    :param domain: the mask.
    """
    if lambda0 < 0:
        raise ValueError(f"lambda0 must be nonnegative, got {lambda0!r}.")
    _check_domain(domain)
    tensors = _element_tensors(field, domain)
    operator = AssembledOperator(domain, _stiffness(domain, tensors), _penalty(domain), _divergence(domain), float(lambda0), tensors)
    logger_for_assembly.debug("Assembled %r.", operator)
    return operator


def assemble_mixed_stokes(field: CoefficientField, domain: DomainMask, beta=STABILIZATION):
    """
    Blocks of ``[A Bᵀ; B -S]`` with ``S = βh²`` times the face-graph Laplacian of the active elements.
    """
    _check_domain(domain)
    tensors = _element_tensors(field, domain)
    stabilization = beta * domain.element_area * _face_laplacian(domain)
    operator = AssembledOperator(domain, _stiffness(domain, tensors), _penalty(domain), _divergence(domain), 0.0, tensors, stabilization)
    logger_for_assembly.debug("Assembled %r with stabilization beta=%r.", operator, beta)
    return operator


def discrete_divergence(u: DiscreteVectorField):
    """Element-center divergence of the bilinear interpolant."""
    mask = u.mask
    return DiscreteScalarField(u.local(mask.active_elements) @ DIVERGENCE_ROW / mask.spacing, mask)


def discrete_gradient(q: DiscreteScalarField, domain: Optional[DomainMask] = None):
    """
    Face-jump gradient of an element scalar: every face adds ``h/2`` times the jump across it to its two nodes.

    Elements outside the domain count as zero. At nodes off the grid border this equals ``-Bᵀq``.
    """
    mask = domain or q.mask
    values = q.on_grid()
    vertical, horizontal = mask.grid.faces
    gradient = np.zeros((mask.grid.node_count, 2))
    half = 0.5 * mask.spacing
    for component, faces in enumerate((vertical, horizontal)):
        jumps = half * (values[faces[:, 1]] - values[faces[:, 0]])
        gradient[:, component] += np.bincount(faces[:, 2], weights=jumps, minlength=mask.grid.node_count)
        gradient[:, component] += np.bincount(faces[:, 3], weights=jumps, minlength=mask.grid.node_count)
    return gradient


def pressure_kernel_labels(domain: DomainMask, free_nodes):
    """
    Components of ``ker Bᵀ`` restricted to the dofs of ``free_nodes`` (a boolean node mask).

    At a free node ``Bᵀq = 0`` forces equal values on the SW/NE and on the NW/SE incident elements. Elements
    tied to a missing or inactive element are forced to zero and get label ``-1``; the other components are
    numbered from 0 in order of their first active element.
    """
    grid = domain.grid
    sentinel = grid.element_count
    incident = grid.node_elements[np.flatnonzero(free_nodes)]
    incident = np.where(incident >= 0, incident, sentinel)
    active = np.zeros(sentinel + 1, dtype=bool)
    active[domain.active_elements] = True
    incident = np.where(active[incident], incident, sentinel)
    rows = np.concatenate([incident[:, 0], incident[:, 3]])
    cols = np.concatenate([incident[:, 2], incident[:, 1]])
    graph = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(sentinel + 1, sentinel + 1))
    _, components = connected_components(graph, directed=False)
    forced = components[domain.active_elements] == components[sentinel]
    components = components[domain.active_elements]
    _, first, inverse = np.unique(components, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    labels = order[inverse.ravel()]
    if forced.any():
        forced_label = labels[forced][0]
        labels = np.where(labels > forced_label, labels - 1, labels)
        labels[forced] = -1
    return labels


def component_means(values, labels):
    """Per-label means broadcast back to the elements; label ``-1`` maps to zero."""
    valid = labels >= 0
    count = int(labels.max()) + 1 if valid.any() else 0
    sums = np.bincount(labels[valid], weights=values[valid], minlength=count)
    sizes = np.bincount(labels[valid], minlength=count)
    means = np.zeros_like(values, dtype=float)
    means[valid] = (sums / sizes)[labels[valid]]
    return means


def filtered_pressure(u: DiscreteVectorField, lambda0):
    """
    The reported pressure ``λ₀∇·u`` with the spurious kernel modes replaced by the global mean.
    """
    pressure = lambda0 * discrete_divergence(u).values
    labels = pressure_kernel_labels(u.mask, u.mask.node_class == INTERIOR)
    filtered = pressure - component_means(pressure, labels)
    filtered[labels >= 0] += pressure.mean()
    return DiscreteScalarField(filtered, u.mask)


def compatible_divergence(f, domain: DomainMask):
    """
    Element divergence compatible with boundary data ``f``: per kernel component, the average of ``∫_e ∇·(lift)``.

    Equals ``⟨f⟩_D`` on every element for affine ``f``.
    """
    lift = lift_boundary_data(domain, f)
    integrals = _divergence(domain) @ lift.ravel()
    labels = pressure_kernel_labels(domain, domain.node_class == INTERIOR)
    values = component_means(integrals, labels) / domain.element_area
    forced = labels < 0
    values[forced] = integrals.sum() / domain.area
    return DiscreteScalarField(values, domain)


def scalar_matrices(domain: DomainMask, elements=None):
    """Scalar Q1 stiffness and mass matrices over all grid nodes, assembled on ``elements``."""
    elements = domain.active_elements if elements is None else elements
    nodes = domain.grid.element_nodes[elements]
    size = domain.grid.node_count
    stiffness = assemble(nodes, np.broadcast_to(SCALAR_STIFFNESS, (len(elements), 4, 4)), size)
    mass = assemble(nodes, np.broadcast_to(domain.element_area * SCALAR_MASS, (len(elements), 4, 4)), size)
    return stiffness, mass


def vector_laplacian(domain: DomainMask, elements=None):
    """``∫ ∇u·∇w`` over interleaved vector dofs; ``uᵀLu`` is the squared gradient norm."""
    stiffness, _ = scalar_matrices(domain, elements)
    return sparse.kron(stiffness, sparse.identity(2), format='csr')


def export_matrix(path, matrix):
    """Write ``row col value`` lines, one per stored entry."""
    path = Path(path)
    coo = sparse.coo_matrix(matrix)
    with path.open('w') as fh:
        for row, col, value in zip(coo.row, coo.col, coo.data):
            fh.write(f"{row} {col} {float(value)!r}\n")
    logger_for_export.info("Wrote %s entries to %s.", coo.nnz, path)
    return path
