from dataclasses import dataclass
from functools import lru_cache, reduce
from typing import Iterable, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from sympy import Rational
from sympy.physics.quantum.cg import CG

from app.errors import DimensionError, QuantumNumberError


Number = Union[int, float, complex]


class QOperator:
    """Complex square matrix on the composite (atom x cavity modes) space.

    Stored as CSR; ``dense()`` gives the ndarray view of the same entries.
    Instances are treated as immutable: every operation returns a new one.
    """

    __slots__ = ("_data",)
    # numpy scalars defer to __rmul__ instead of wrapping us in an object array
    __array_ufunc__ = None

    def __init__(self, data) -> None:
        if sp.issparse(data):
            matrix = sp.csr_matrix(data, dtype=np.complex128)
        else:
            arr = np.asarray(data, dtype=np.complex128)
            if arr.ndim != 2:
                raise DimensionError(f"Operator entries must be 2-d, got shape {arr.shape}")
            matrix = sp.csr_matrix(arr)
        if matrix.shape[0] != matrix.shape[1]:
            raise DimensionError(f"Operator must be square, got shape {matrix.shape}")
        if matrix.shape[0] < 1:
            raise DimensionError("Operator dimension must be >= 1")
        matrix.sum_duplicates()
        self._data = matrix

    @classmethod
    def identity(cls, dim: int) -> "QOperator":
        return cls(sp.identity(dim, dtype=np.complex128, format="csr"))

    @classmethod
    def zeros(cls, dim: int) -> "QOperator":
        return cls(sp.csr_matrix((dim, dim), dtype=np.complex128))

    @property
    def dim(self) -> int:
        return self._data.shape[0]

    @property
    def sparse(self) -> sp.csr_matrix:
        return self._data

    def dense(self) -> np.ndarray:
        return self._data.toarray()

    def __getitem__(self, index):
        return self._data[index]

    def hermiticity_error(self) -> float:
        """max |A - A^dagger| over all entries."""
        diff = self._data - self._data.conj().T
        if diff.nnz == 0:
            return 0.0
        return float(abs(diff).max())

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        return self.hermiticity_error() <= tol

    def _check_dim(self, other: "QOperator") -> None:
        if self.dim != other.dim:
            raise DimensionError(f"Dimension mismatch: {self.dim} vs {other.dim}")

    def __add__(self, other: "QOperator") -> "QOperator":
        self._check_dim(other)
        return QOperator(self._data + other._data)

    def __sub__(self, other: "QOperator") -> "QOperator":
        self._check_dim(other)
        return QOperator(self._data - other._data)

    def __neg__(self) -> "QOperator":
        return QOperator(-self._data)

    def __mul__(self, scalar: Number) -> "QOperator":
        if isinstance(scalar, QOperator):
            return NotImplemented
        return QOperator(self._data * complex(scalar))

    __rmul__ = __mul__

    def __matmul__(self, other: "QOperator") -> "QOperator":
        self._check_dim(other)
        return QOperator(self._data @ other._data)

    def __repr__(self) -> str:
        return f"QOperator(dim={self.dim}, nnz={self._data.nnz})"


def kron(a: QOperator, b: QOperator) -> QOperator:
    """Tensor product; ``a`` is the slow (outer) index of the flattened result."""
    return QOperator(sp.kron(a.sparse, b.sparse, format="csr"))


def tensor(*ops: QOperator) -> QOperator:
    if not ops:
        raise DimensionError("tensor() needs at least one operator")
    return reduce(kron, ops)


def dagger(a: QOperator) -> QOperator:
    return QOperator(a.sparse.conj().T)


def annihilator(cutoff: int) -> QOperator:
    """Truncated bosonic lowering operator on Fock states 0..cutoff."""
    if cutoff < 1:
        raise DimensionError(f"Fock cutoff must be >= 1, got {cutoff}")
    n = np.arange(1, cutoff + 1)
    return QOperator(sp.diags(np.sqrt(n).astype(np.complex128), offsets=1, format="csr"))


def projector(dim: int, indices: Iterable[int]) -> QOperator:
    diag = np.zeros(dim, dtype=np.complex128)
    diag[list(indices)] = 1.0
    return QOperator(sp.diags(diag, format="csr"))


def embed(op: QOperator, position: int, dims: Sequence[int]) -> QOperator:
    """Place ``op`` at ``position`` of the tensor product described by ``dims``."""
    if dims[position] != op.dim:
        raise DimensionError(f"Factor {position} has dim {dims[position]}, operator has {op.dim}")
    factors = [op if i == position else QOperator.identity(d) for i, d in enumerate(dims)]
    return tensor(*factors)


@dataclass(frozen=True)
class KetIndex:
    """Composite basis label; atom index is the slowest digit, then modes in order."""

    atom_index: int
    fock_indices: Tuple[int, ...] = ()

    def flatten(self, atom_dim: int, cutoff: int) -> int:
        dims = (atom_dim,) + (cutoff + 1,) * len(self.fock_indices)
        return int(np.ravel_multi_index((self.atom_index,) + tuple(self.fock_indices), dims))

    @classmethod
    def unflatten(cls, index: int, atom_dim: int, n_modes: int, cutoff: int) -> "KetIndex":
        dims = (atom_dim,) + (cutoff + 1,) * n_modes
        digits = np.unravel_index(int(index), dims)
        return cls(int(digits[0]), tuple(int(d) for d in digits[1:]))


def _doubled(x: float, name: str) -> int:
    twice = 2.0 * float(x)
    rounded = int(round(twice))
    if abs(twice - rounded) > 1e-9:
        raise QuantumNumberError(f"{name}={x} is not a half-integer")
    return rounded


@lru_cache(maxsize=None)
def _cg_doubled(tj1: int, tm1: int, tj2: int, tm2: int, tj: int, tm: int) -> float:
    value = CG(Rational(tj1, 2), Rational(tm1, 2), Rational(tj2, 2), Rational(tm2, 2),
               Rational(tj, 2), Rational(tm, 2)).doit()
    return float(value)


def clebsch_gordan(j1: float, m1: float, j2: float, m2: float, J: float, M: float) -> float:
    """<j1 m1; j2 m2 | J M> in the Condon-Shortley convention."""
    doubled = []
    for name, (j, m) in (("j1", (j1, m1)), ("j2", (j2, m2)), ("J", (J, M))):
        tj = _doubled(j, name)
        tm = _doubled(m, f"m({name})")
        if tj < 0:
            raise QuantumNumberError(f"{name}={j} must be non-negative")
        if abs(tm) > tj:
            raise QuantumNumberError(f"|m|={abs(m)} exceeds {name}={j}")
        if (tj - tm) % 2:
            raise QuantumNumberError(f"m={m} and {name}={j} differ by a non-integer")
        doubled.extend((tj, tm))
    tj1, tm1, tj2, tm2, tj, tm = doubled
    if tm != tm1 + tm2:
        return 0.0
    if tj < abs(tj1 - tj2) or tj > tj1 + tj2 or (tj1 + tj2 + tj) % 2:
        return 0.0
    return _cg_doubled(tj1, tm1, tj2, tm2, tj, tm)


def m_values(j: float) -> Tuple[float, ...]:
    """Magnetic quantum numbers -j..+j in ascending order."""
    tj = _doubled(j, "j")
    return tuple(tm / 2.0 for tm in range(-tj, tj + 1, 2))

