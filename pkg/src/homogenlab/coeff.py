"""
Random coefficient fields ``(A, λ)`` on a lattice of unit cells.

The rank-4 tensor ``a_{ij}^{αβ}`` is stored per cell as a symmetric 4×4 matrix ``M`` with
``M[2α + i, 2β + j] = a_{ij}^{αβ}``, so that a displacement gradient flattened as ``G[2α + i] = ∂_i u^α``
has energy density ``G·MG``. Cell ``c = k2 * N + k1`` covers
``[-εN/2 + εk1, -εN/2 + ε(k1 + 1)] × [-εN/2 + εk2, -εN/2 + ε(k2 + 1)]``.
"""
import math
import struct
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import NamedTuple
from typing import Optional
from typing import Tuple

import numpy as np
from scipy.stats import ortho_group

logger_for_sample = getLogger(f"{__name__}.sample")
logger_for_split = getLogger(f"{__name__}.split")
logger_for_io = getLogger(f"{__name__}.io")

TWO_PHASE = 'two-phase-checkerboard'
IID_TENSOR = 'iid-uniform-tensor'
CONSTANT = 'constant'
MODEL_KINDS = (TWO_PHASE, IID_TENSOR, CONSTANT)

# δ_i^α δ_j^β in the flattened (2α + i, 2β + j) layout.
TRACE_BLOCK = np.zeros((4, 4))
TRACE_BLOCK[np.ix_((0, 3), (0, 3))] = 1.0
TRACE_BLOCK.setflags(write=False)

MAGIC = b'HLAB1'
_HEADER = struct.Struct('<5sqdd')
_SEED_MASK = (1 << 64) - 1


def _readonly(array, dtype=float):
    array = np.array(array, dtype=dtype)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False, repr=False)
class CoefficientField:
    """
    Piecewise-constant realization of ``(A(x/ε), λ(x/ε))``.

    :param cells_per_side: number of unit cells ``N`` per side of the lattice.
    :param tensor_values: per-cell 4×4 matrices, shape ``(N*N, 4, 4)``.
    :param lambda_values: per-cell ``λ``, shape ``(N*N,)``.
    :param epsilon: oscillation scale (the physical side of one cell).
    :param lambda0: the constant part of ``λ``; ``λ(x) - lambda0`` is the variable part ``b``.
    """

    cells_per_side: int
    tensor_values: np.ndarray
    lambda_values: np.ndarray
    epsilon: float
    lambda0: float = 0.0

    def __post_init__(self):
        cells = self.cells_per_side
        if not isinstance(cells, (int, np.integer)) or cells < 1:
            raise ValueError(f"cells_per_side must be a positive integer, got {cells!r}.")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon!r}.")
        if self.lambda0 < 0:
            raise ValueError(f"lambda0 must be nonnegative, got {self.lambda0!r}.")
        tensor = _readonly(self.tensor_values)
        lambdas = _readonly(self.lambda_values)
        if tensor.shape != (cells * cells, 4, 4):
            raise ValueError(f"tensor_values must have shape {(cells * cells, 4, 4)}, got {tensor.shape}.")
        if lambdas.shape != (cells * cells,):
            raise ValueError(f"lambda_values must have shape {(cells * cells,)}, got {lambdas.shape}.")
        object.__setattr__(self, 'cells_per_side', int(cells))
        object.__setattr__(self, 'epsilon', float(self.epsilon))
        object.__setattr__(self, 'lambda0', float(self.lambda0))
        object.__setattr__(self, 'tensor_values', tensor)
        object.__setattr__(self, 'lambda_values', lambdas)

    def __repr__(self):
        return f"CoefficientField(cells_per_side={self.cells_per_side}, epsilon={self.epsilon!r}, lambda0={self.lambda0!r})"

    @classmethod
    def uniform(cls, tensor, lambda0=0.0, half_width=1.0):
        """
        A single cell covering ``[-half_width, half_width]²`` with a constant tensor.
        """
        tensor = np.asarray(tensor, dtype=float).reshape(1, 4, 4)
        return cls(1, tensor, np.array([float(lambda0)]), 2.0 * half_width, lambda0)

    @property
    def half_width(self):
        return 0.5 * self.epsilon * self.cells_per_side

    @property
    def variable_lambda(self):
        """The part ``b = λ - lambda0`` not yet absorbed into the tensor."""
        return self.lambda_values - self.lambda0

    def as_rank4(self):
        """
        View of the tensor as ``a[c, i, j, α, β]``.
        """
        n = self.cells_per_side ** 2
        return self.tensor_values.reshape(n, 2, 2, 2, 2).transpose(0, 2, 4, 1, 3)

    def cell_of(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        cells = self.cells_per_side
        scaled = points / self.epsilon + 0.5 * cells
        if np.any(scaled < -0.5) or np.any(scaled > cells + 0.5):
            raise ValueError(f"{self!r} does not cover the requested points (half width {self.half_width!r}).")
        index = np.clip(np.floor(scaled).astype(np.int64), 0, cells - 1)
        return index[:, 1] * cells + index[:, 0]

    def effective_tensors(self, points):
        """
        Tensors ``M + b·T`` at the given points, where ``T`` is the trace block.

        The constant part ``lambda0`` is not included; assembly adds it with one-point quadrature.
        """
        cells = self.cell_of(points)
        b = self.variable_lambda[cells]
        return self.tensor_values[cells] + b[:, None, None] * TRACE_BLOCK

    def with_lambda0(self, value):
        """
        Replace the constant part of ``λ`` by ``value``, keeping the variable part.
        """
        if value < 0:
            raise ValueError(f"lambda0 must be nonnegative, got {value!r}.")
        return CoefficientField(self.cells_per_side, self.tensor_values, self.variable_lambda + value, self.epsilon, value)

    def window(self, offset, size):
        """
        Restriction to ``size × size`` cells starting at cell ``offset = (k1, k2)``, recentered at the origin.
        """
        k1, k2 = offset
        cells = self.cells_per_side
        if size < 1 or k1 < 0 or k2 < 0 or k1 + size > cells or k2 + size > cells:
            raise ValueError(f"Window at {offset!r} of size {size!r} does not fit in {cells}×{cells} cells.")
        tensor = self.tensor_values.reshape(cells, cells, 4, 4)[k2 : k2 + size, k1 : k1 + size]
        lambdas = self.lambda_values.reshape(cells, cells)[k2 : k2 + size, k1 : k1 + size]
        return CoefficientField(size, tensor.reshape(size * size, 4, 4), lambdas.ravel(), self.epsilon, self.lambda0)

    def to_bytes(self):
        n = self.cells_per_side ** 2
        records = np.concatenate([self.tensor_values.reshape(n, 16), self.lambda_values[:, None]], axis=1)
        header = _HEADER.pack(MAGIC, self.cells_per_side, self.epsilon, self.lambda0)
        return header + records.astype('<f8').tobytes()

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _HEADER.size:
            raise ValueError("Truncated HLAB1 header.")
        magic, cells, epsilon, lambda0 = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError(f"Not a HLAB1 field (magic {magic!r}).")
        n = cells * cells
        expected = _HEADER.size + n * 17 * 8
        if len(data) != expected:
            raise ValueError(f"HLAB1 payload has {len(data)} bytes, expected {expected}.")
        records = np.frombuffer(data, dtype='<f8', offset=_HEADER.size).reshape(n, 17)
        return cls(cells, records[:, :16].reshape(n, 4, 4), records[:, 16], epsilon, lambda0)


@dataclass(frozen=True)
class RandomFieldModel:
    """
    Law of the i.i.d. unit-cell draws.

    :param model_kind: one of ``two-phase-checkerboard``, ``iid-uniform-tensor`` or ``constant``.
    :param contrast: ratio of the largest to the smallest phase modulus.
    :param lambda0: constant part of ``λ``.
    :param lambda_band: width of the ``λ`` oscillation, ``λ ∈ [lambda0, lambda0 + lambda_band]``.
    :param big_lambda: the ellipticity constant ``Λ``.
    :param base_tensor: 16 entries of the tensor used by the constant model (identity when omitted).
    """

    model_kind: str = TWO_PHASE
    contrast: float = 4.0
    lambda0: float = 0.0
    lambda_band: float = 0.0
    big_lambda: float = 2.0
    base_tensor: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}.")
        if self.big_lambda < 1:
            raise ValueError(f"big_lambda must be at least 1, got {self.big_lambda!r}.")
        if self.contrast < 1:
            raise ValueError(f"contrast must be at least 1, got {self.contrast!r}.")
        if math.sqrt(self.contrast) > self.big_lambda * (1 + 1e-12):
            raise ValueError(f"contrast {self.contrast!r} is not compatible with big_lambda {self.big_lambda!r} (needs √contrast ≤ Λ).")
        if self.lambda0 < 0:
            raise ValueError(f"lambda0 must be nonnegative, got {self.lambda0!r}.")
        if not 0 <= self.lambda_band <= self.big_lambda:
            raise ValueError(f"lambda_band must lie in [0, {self.big_lambda!r}], got {self.lambda_band!r}.")
        if self.base_tensor is not None:
            tensor = np.asarray(self.base_tensor, dtype=float)
            if tensor.size != 16:
                raise ValueError(f"base_tensor must have 16 entries, got {tensor.size}.")
            tensor = tensor.reshape(4, 4)
            if not np.array_equal(tensor, tensor.T):
                raise ValueError("base_tensor must be symmetric.")
            eigenvalues = np.linalg.eigvalsh(tensor)
            if eigenvalues[0] < 1 / self.big_lambda - 1e-12 or eigenvalues[-1] > self.big_lambda + 1e-12:
                raise ValueError(f"base_tensor eigenvalues {eigenvalues} leave [1/Λ, Λ] for Λ = {self.big_lambda!r}.")
            object.__setattr__(self, 'base_tensor', tuple(float(value) for value in tensor.ravel()))

    def draw(self, generator):
        """
        Draw one cell's ``(tensor, λ)`` from ``generator``.
        """
        if self.model_kind == TWO_PHASE:
            stiff = generator.random() < 0.5
            factor = math.sqrt(self.contrast) if stiff else 1 / math.sqrt(self.contrast)
            return factor * np.eye(4), self.lambda0 + self.lambda_band * stiff
        elif self.model_kind == IID_TENSOR:
            bound = math.sqrt(self.contrast)
            eigenvalues = generator.uniform(1 / bound, bound, 4)
            rotation = ortho_group.rvs(4, random_state=generator)
            tensor = (rotation * eigenvalues) @ rotation.T
            return 0.5 * (tensor + tensor.T), self.lambda0 + self.lambda_band * generator.random()
        else:
            tensor = np.eye(4) if self.base_tensor is None else np.asarray(self.base_tensor).reshape(4, 4)
            return tensor, self.lambda0


class EllipticityReport(NamedTuple):
    min_eig: float
    max_eig: float
    symmetric: bool
    lambda_min: float
    lambda_max: float


def cell_generator(seed, cell):
    """
    Counter-based generator for one cell: the Philox key packs ``(cell, seed)``.
    """
    return np.random.Generator(np.random.Philox(key=(int(cell) << 64) | (int(seed) & _SEED_MASK)))


def required_cells(epsilon, half_width=1.0):
    return math.ceil(2 * half_width / epsilon - 1e-9)


def sample_field(model: RandomFieldModel, seed, epsilon, cells_per_side, half_width=1.0):
    """
    Sample a field realization; a pure function of its arguments.

    :param model: the :class:`RandomFieldModel`.
    :param seed: 64-bit integer seed.
    :param epsilon: cell size.
    :param cells_per_side: lattice size; must cover ``[-half_width, half_width]²``.
    :param half_width: half side of the square the lattice must cover.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon!r}.")
    if cells_per_side < 1:
        raise ValueError(f"cells_per_side must be at least 1, got {cells_per_side!r}.")
    needed = required_cells(epsilon, half_width)
    if cells_per_side < needed:
        raise ValueError(f"cells_per_side={cells_per_side} cannot cover [-{half_width}, {half_width}]² at epsilon={epsilon!r} (needs {needed}).")
    count = cells_per_side * cells_per_side
    logger_for_sample.debug("Sampling %s cells of %r with seed %s ...", count, model, seed)
    tensors = np.empty((count, 4, 4))
    lambdas = np.empty(count)
    for cell in range(count):
        tensors[cell], lambdas[cell] = model.draw(cell_generator(seed, cell))
    field = CoefficientField(cells_per_side, tensors, lambdas, epsilon, model.lambda0)
    logger_for_sample.info("Sampled %r.", field)
    return field


def split_compressibility(field: CoefficientField):
    """
    Absorb ``b = λ - min λ`` into the tensor's trace block so that ``λ`` becomes the constant ``min λ``.

    Applying it twice gives the same field as applying it once.
    """
    lambda0 = float(field.lambda_values.min())
    b = field.lambda_values - lambda0
    tensors = field.tensor_values + b[:, None, None] * TRACE_BLOCK
    split = CoefficientField(field.cells_per_side, tensors, np.full_like(b, lambda0), field.epsilon, lambda0)
    logger_for_split.debug("Split %r: lambda0=%r, max b=%r.", field, lambda0, float(b.max()))
    return split


def verify_ellipticity(field: CoefficientField):
    """
    Extreme eigenvalues of the per-cell 4×4 matrices, exact symmetry and the ``λ`` range.
    """
    tensors = field.tensor_values
    symmetric = bool(np.array_equal(tensors, tensors.transpose(0, 2, 1)))
    eigenvalues = np.linalg.eigvalsh(0.5 * (tensors + tensors.transpose(0, 2, 1)))
    return EllipticityReport(
        float(eigenvalues.min()),
        float(eigenvalues.max()),
        symmetric,
        float(field.lambda_values.min()),
        float(field.lambda_values.max()),
    )


def write_field(path, field: CoefficientField):
    path = Path(path)
    path.write_bytes(field.to_bytes())
    logger_for_io.info("Wrote %r to %s.", field, path)
    return path


def read_field(path):
    path = Path(path)
    field = CoefficientField.from_bytes(path.read_bytes())
    logger_for_io.info("Read %r from %s.", field, path)
    return field
