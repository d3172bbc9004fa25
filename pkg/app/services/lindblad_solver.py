import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import expm_multiply, splu
from scipy.sparse.linalg import norm as sparse_norm

from app.errors import DimensionError, SolverError, StiffnessError
from .qops import QOperator

# Vectorization is column-stacking: vec(rho)[i + j*dim] = rho[i, j],
# so vec(A rho B) = (B^T kron A) vec(rho).

DEFAULT_RTOL = 1e-9
DEFAULT_ATOL = 1e-12
REFINEMENT_STEPS = 3


@dataclass(frozen=True)
class Liouvillian:
    superoperator: sp.csr_matrix
    dim: int

    def apply(self, rho: np.ndarray) -> np.ndarray:
        """L(rho) for a dense dim x dim matrix."""
        out = self.superoperator @ vectorize(rho)
        return unvectorize(out, self.dim)


class DensityMatrix:
    """Density matrix with the trace / Hermiticity / positivity checks."""

    __slots__ = ("entries",)

    def __init__(self, entries: np.ndarray) -> None:
        arr = np.asarray(entries, dtype=np.complex128)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise DimensionError(f"Density matrix must be square, got shape {arr.shape}")
        arr.setflags(write=False)
        self.entries = arr

    @classmethod
    def from_vector(cls, vec: np.ndarray, dim: int) -> "DensityMatrix":
        return cls(unvectorize(vec, dim))

    @classmethod
    def pure(cls, dim: int, index: int) -> "DensityMatrix":
        rho = np.zeros((dim, dim), dtype=np.complex128)
        rho[index, index] = 1.0
        return cls(rho)

    @classmethod
    def mixed(cls, dim: int, indices: Optional[Sequence[int]] = None) -> "DensityMatrix":
        idx = list(range(dim)) if indices is None else list(indices)
        rho = np.zeros((dim, dim), dtype=np.complex128)
        rho[idx, idx] = 1.0 / len(idx)
        return cls(rho)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def trace(self) -> complex:
        return complex(np.trace(self.entries))

    def hermiticity_error(self) -> float:
        return float(np.max(np.abs(self.entries - self.entries.conj().T)))

    def min_eigenvalue(self) -> float:
        herm = 0.5 * (self.entries + self.entries.conj().T)
        return float(np.linalg.eigvalsh(herm)[0])

    def populations(self) -> np.ndarray:
        return np.real(np.diag(self.entries)).copy()

    def invariant_violations(self, trace_tol: float = 1e-10, herm_tol: float = 1e-10,
                             pos_tol: float = 1e-8) -> List[str]:
        problems = []
        trace_err = abs(self.trace() - 1.0)
        if trace_err > trace_tol:
            problems.append(f"trace off by {trace_err:.3g}")
        herm_err = self.hermiticity_error()
        if herm_err > herm_tol:
            problems.append(f"non-Hermitian by {herm_err:.3g}")
        min_eig = self.min_eigenvalue()
        if min_eig < -pos_tol:
            problems.append(f"minimum eigenvalue {min_eig:.3g}")
        return problems


def vectorize(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho, dtype=np.complex128).reshape(-1, order="F")


def unvectorize(vec: np.ndarray, dim: int) -> np.ndarray:
    return np.asarray(vec, dtype=np.complex128).reshape((dim, dim), order="F")


def assemble(h: QOperator, collapse: Sequence[QOperator]) -> Liouvillian:
    """L(rho) = -i[H, rho] + sum_k (C rho C^dag - 1/2 {C^dag C, rho})."""
    dim = h.dim
    for k, c in enumerate(collapse):
        if c.dim != dim:
            raise DimensionError(f"Collapse operator {k} has dim {c.dim}, Hamiltonian has {dim}")
    eye = sp.identity(dim, dtype=np.complex128, format="csr")
    hs = h.sparse
    superop = -1j * (sp.kron(eye, hs, format="csr") - sp.kron(hs.T, eye, format="csr"))
    for c in collapse:
        cs = c.sparse
        cdc = (cs.conj().T @ cs).tocsr()
        superop = superop + sp.kron(cs.conj(), cs, format="csr")
        superop = superop - 0.5 * sp.kron(eye, cdc, format="csr")
        superop = superop - 0.5 * sp.kron(cdc.T, eye, format="csr")
    superop = sp.csr_matrix(superop)
    superop.eliminate_zeros()
    return Liouvillian(superop, dim)


def _trace_row(dim: int) -> np.ndarray:
    return np.arange(dim) * (dim + 1)


def _finalize(vec: np.ndarray, dim: int, residual: float) -> DensityMatrix:
    rho = unvectorize(vec, dim)
    rho = 0.5 * (rho + rho.conj().T)
    trace = np.trace(rho).real
    if not np.isfinite(trace) or abs(trace) < 1e-12:
        raise SolverError(f"Steady state is not unique: null vector has trace {trace:.3g}", residual=residual)
    rho = rho / trace
    evals, evecs = np.linalg.eigh(rho)
    if evals[0] < -1e-8:
        # a converged null vector that is not a state: the kernel of L has more than one dimension
        raise SolverError(f"Steady state is not unique: null vector with relative residual |L rho| = {residual:.3g} "
                          f"has eigenvalue {evals[0]:.3g} below the positivity tolerance", residual=residual)
    if evals[0] < 0:
        evals = np.clip(evals, 0.0, None)
        rho = (evecs * evals) @ evecs.conj().T
        rho = rho / np.trace(rho).real
    return DensityMatrix(rho)


def steady_state(l: Liouvillian, dense: bool = False, residual_tol: float = 1e-9) -> DensityMatrix:
    """Null vector of L with unit trace.

    One row of L is replaced by the trace functional (scaled to the size of
    L) and the bordered system is factorised once with sparse LU; a few
    rounds of iterative refinement follow when the residual is too large.
    """
    dim = l.dim
    n = dim * dim
    scale = float(sparse_norm(l.superoperator, np.inf))
    if scale == 0.0:
        raise SolverError("Liouvillian is identically zero; steady state is not unique", residual=0.0)
    trace_cols = _trace_row(dim)

    bordered = l.superoperator.tolil(copy=True)
    bordered[0, :] = 0.0
    bordered[0, trace_cols] = scale
    bordered = bordered.tocsc()
    rhs = np.zeros(n, dtype=np.complex128)
    rhs[0] = scale

    try:
        if dense:
            matrix = bordered.toarray()
            solve = lambda b: np.linalg.solve(matrix, b)  # noqa: E731
        else:
            lu = splu(bordered)
            solve = lu.solve
        vec = solve(rhs)
    except (RuntimeError, np.linalg.LinAlgError) as e:
        raise SolverError(f"Steady state is not unique: bordered system is singular ({e})") from e

    residual = float(np.max(np.abs(l.superoperator @ vec))) / scale
    for step in range(REFINEMENT_STEPS):
        if residual < residual_tol:
            break
        vec = vec + solve(rhs - bordered @ vec)
        residual = float(np.max(np.abs(l.superoperator @ vec))) / scale
        logging.debug(f"[solver] refinement step {step + 1}: residual {residual:.3g}")
    if not np.all(np.isfinite(vec)) or residual >= residual_tol:
        raise SolverError(f"Steady state did not converge or is not unique: "
                          f"relative residual |L rho| = {residual:.3g}", residual=residual)
    return _finalize(vec, dim, residual)


def evolve(rho0: DensityMatrix, l: Liouvillian, times: Sequence[float], rtol: float = DEFAULT_RTOL,
           atol: float = DEFAULT_ATOL, method: str = "RK45") -> List[DensityMatrix]:
    """rho(t) for every t in ``times``; rho(times[0]) = rho0.

    ``method="RK45"`` is the adaptive Dormand-Prince 4(5) integrator;
    ``method="expm"`` applies exp(L t) directly and needs a uniform grid.
    Positivity is only monitored.
    """
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("times must be a non-empty 1-d grid")
    if np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing")
    if rho0.dim != l.dim:
        raise DimensionError(f"Initial state has dim {rho0.dim}, Liouvillian has {l.dim}")
    y0 = vectorize(rho0.entries)

    if t.size == 1:
        vectors = y0[np.newaxis, :]
    elif method == "expm":
        steps = np.diff(t)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
            raise ValueError("method='expm' needs a uniformly spaced time grid")
        vectors = expm_multiply(l.superoperator.tocsc(), y0, start=0.0, stop=t[-1] - t[0],
                                num=t.size, endpoint=True)
    elif method in ("RK45", "DOP853"):
        superop = l.superoperator
        sol = solve_ivp(lambda _t, y: superop @ y, (t[0], t[-1]), y0, method=method,
                        t_eval=t, rtol=rtol, atol=atol)
        if sol.status != 0:
            raise StiffnessError(f"Integrator stopped at t={sol.t[-1] if sol.t.size else t[0]:.6g}: {sol.message}")
        vectors = sol.y.T
    else:
        raise ValueError(f"Unknown evolve method {method!r}")

    states = [DensityMatrix.from_vector(v, l.dim) for v in vectors]
    _monitor(states, t)
    return states


def _monitor(states: Sequence[DensityMatrix], times: np.ndarray) -> None:
    worst_trace = max(abs(s.trace() - 1.0) for s in states)
    worst_herm = max(s.hermiticity_error() for s in states)
    if worst_trace > 1e-8 or worst_herm > 1e-9:
        logging.warning(f"[solver] evolution drift: trace {worst_trace:.3g}, hermiticity {worst_herm:.3g}")
    # eigenvalues are the expensive check; sample the ends and the middle
    for k in sorted({0, len(states) // 2, len(states) - 1}):
        min_eig = states[k].min_eigenvalue()
        if min_eig < -1e-7:
            logging.warning(f"[solver] negative eigenvalue {min_eig:.3g} at t={times[k]:.6g} s")


def expect(op: QOperator, rho: DensityMatrix) -> complex:
    if op.dim != rho.dim:
        raise DimensionError(f"Operator has dim {op.dim}, density matrix has {rho.dim}")
    # tr(A rho) = sum_ij A_ij rho_ji
    return complex((op.sparse.multiply(rho.entries.T)).sum())


def expect_series(op: QOperator, states: Sequence[DensityMatrix]) -> np.ndarray:
    return np.array([expect(op, s) for s in states])


def reduce_to_atom(rho: DensityMatrix, atom_dim: int) -> DensityMatrix:
    """Trace out every cavity mode; the atom is the slowest tensor factor."""
    if rho.dim % atom_dim:
        raise DimensionError(f"dim {rho.dim} is not a multiple of the atomic dim {atom_dim}")
    rest = rho.dim // atom_dim
    blocks = rho.entries.reshape(atom_dim, rest, atom_dim, rest)
    return DensityMatrix(np.einsum("ikjk->ij", blocks))
