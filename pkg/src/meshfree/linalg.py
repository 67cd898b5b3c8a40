"""Restarted GMRES, ILU(0)/Jacobi preconditioners and direct solves on CSR matrices.

Storage is ``scipy.sparse.csr_matrix``; the Krylov iteration and the
incomplete factorization are implemented here so residual histories and
iteration counts are fully under our control.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    method: str = "gmres"  # gmres | dense | sparse
    restart: int = 30
    tol: float = 1e-10
    max_iter: int = 10000
    preconditioner: str = "none"  # none | jacobi | ilu0

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.restart < 1:
            raise ValueError("restart must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.method not in ("gmres", "dense", "sparse"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.preconditioner not in ("none", "jacobi", "ilu0"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class SolveResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual: float  # recomputed ||b - A x|| / ||b||
    history: list[float] = field(default_factory=list)
    cycle_starts: list[int] = field(default_factory=list)


def as_csr(A) -> sp.csr_matrix:
    """Canonical CSR: sorted column indices, duplicates summed, no stored zeros."""
    A = sp.csr_matrix(A, dtype=float)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A


def spmv(A: sp.csr_matrix, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {A.shape} times {x.shape}")
    return A @ x


def relative_residual(A, x, b) -> float:
    nb = np.linalg.norm(b)
    r = np.linalg.norm(b - A @ x)
    return float(r / nb) if nb > 0 else float(r)


# -- preconditioners -----------------------------------------------------------


class Identity:
    def apply(self, v):
        return v


class Jacobi:
    def __init__(self, A: sp.csr_matrix):
        d = A.diagonal()
        bad = np.flatnonzero(d == 0)
        if bad.size:
            raise SolverError(f"zero diagonal in row {bad[0]}")
        self.inv = 1.0 / d

    def apply(self, v):
        return self.inv * v


class ILU0:
    """Incomplete LU with the sparsity pattern of ``A`` (IKJ ordering).

    ``L`` is unit lower triangular; both factors are stored in one CSR array
    sharing the pattern of ``A``.
    """

    def __init__(self, A: sp.csr_matrix):
        A = as_csr(A)
        n = A.shape[0]
        ptr, idx = A.indptr, A.indices
        val = A.data.copy()
        diag = np.full(n, -1, dtype=np.int64)
        for i in range(n):
            lo, hi = ptr[i], ptr[i + 1]
            k = lo + np.searchsorted(idx[lo:hi], i)
            if k < hi and idx[k] == i:
                diag[i] = k
        for i in range(n):
            if diag[i] < 0:
                raise SolverError(f"ILU0 needs a stored diagonal, missing in row {i}")
            lo, hi = ptr[i], ptr[i + 1]
            cols = idx[lo:hi]
            pos = dict(zip(cols.tolist(), range(lo, hi)))
            for kk in range(lo, diag[i]):
                k = idx[kk]
                piv = val[diag[k]]
                if piv == 0.0:
                    raise SolverError(f"zero pivot in row {k}")
                val[kk] /= piv
                lik = val[kk]
                for jj in range(diag[k] + 1, ptr[k + 1]):
                    p = pos.get(idx[jj])
                    if p is not None:
                        val[p] -= lik * val[jj]
            if val[diag[i]] == 0.0:
                raise SolverError(f"zero pivot in row {i}")
        LU = sp.csr_matrix((val, idx.copy(), ptr.copy()), shape=A.shape)
        self.L = sp.tril(LU, k=-1, format="csr") + sp.identity(n, format="csr")
        self.U = sp.triu(LU, k=0, format="csr")
        self.L.sort_indices()
        self.U.sort_indices()

    def apply(self, v):
        y = spla.spsolve_triangular(self.L, v, lower=True, unit_diagonal=True)
        return spla.spsolve_triangular(self.U, y, lower=False)


def ilu0(A) -> ILU0:
    return ILU0(A)


def make_preconditioner(A, kind: str):
    if kind == "none":
        return Identity()
    if kind == "jacobi":
        return Jacobi(as_csr(A))
    if kind == "ilu0":
        return ILU0(A)
    raise ValueError(f"unknown preconditioner {kind!r}")


# -- Krylov -------------------------------------------------------------------


def _givens(a: float, b: float) -> tuple[float, float]:
    if b == 0.0:
        return 1.0, 0.0
    r = np.hypot(a, b)
    return a / r, b / r


def gmres(A, b, cfg: SolverConfig | None = None, x0=None, precond=None) -> SolveResult:
    """Right-preconditioned restarted GMRES.

    Right preconditioning keeps the monitored residual equal to the true
    residual of the original system, so the history is directly comparable
    between preconditioners.
    """
    cfg = cfg or SolverConfig()
    A = as_csr(A)
    b = np.asarray(b, dtype=float)
    n = b.size
    if A.shape[0] != n:
        raise ValueError("dimension mismatch between A and b")
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side is not finite")
    M = precond if precond is not None else make_preconditioner(A, cfg.preconditioner)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return SolveResult(np.zeros(n), True, 0, 0.0, [0.0], [0])

    history: list[float] = []
    starts: list[int] = []
    it = 0
    m = min(cfg.restart, n)
    best_x, best_res = x.copy(), np.inf
    while True:
        r = b - A @ x
        beta = np.linalg.norm(r)
        res = beta / bnorm
        history.append(float(res))
        starts.append(len(history) - 1)
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= cfg.tol or it >= cfg.max_iter:
            break
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k_done = 0
        for k in range(m):
            Z[k] = M.apply(V[k])
            w = A @ Z[k]
            for _ in range(2):  # MGS plus one reorthogonalization pass
                for j in range(k + 1):
                    hij = np.dot(V[j], w)
                    H[j, k] += hij
                    w -= hij * V[j]
            H[k + 1, k] = np.linalg.norm(w)
            if H[k + 1, k] > 0:
                V[k + 1] = w / H[k + 1, k]
            for j in range(k):
                t = cs[j] * H[j, k] + sn[j] * H[j + 1, k]
                H[j + 1, k] = -sn[j] * H[j, k] + cs[j] * H[j + 1, k]
                H[j, k] = t
            cs[k], sn[k] = _givens(H[k, k], H[k + 1, k])
            H[k, k] = cs[k] * H[k, k] + sn[k] * H[k + 1, k]
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            it += 1
            k_done = k + 1
            est = abs(g[k + 1]) / bnorm
            history.append(float(est))
            if est <= cfg.tol or it >= cfg.max_iter or H[k, k] == 0.0:
                break
        y = sla.solve_triangular(H[:k_done, :k_done], g[:k_done])
        x = x + y @ Z[:k_done]
        if it >= cfg.max_iter:
            r = b - A @ x
            res = np.linalg.norm(r) / bnorm
            if res < best_res:
                best_x, best_res = x.copy(), res
            break
    final = relative_residual(A, best_x, b)
    return SolveResult(best_x, final <= cfg.tol * (1 + 1e-8) or final <= cfg.tol + 1e-15, it, final, history, starts)


def direct_dense(A, b) -> np.ndarray:
    A = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    return np.linalg.solve(A, np.asarray(b, dtype=float))


def direct_sparse(A, b) -> np.ndarray:
    return spla.splu(sp.csc_matrix(A)).solve(np.asarray(b, dtype=float))


def solve(A, b, cfg: SolverConfig | None = None) -> SolveResult:
    cfg = cfg or SolverConfig()
    if cfg.method == "gmres":
        return gmres(A, b, cfg)
    x = direct_dense(A, b) if cfg.method == "dense" else direct_sparse(A, b)
    res = relative_residual(A, x, b)
    return SolveResult(x, bool(np.all(np.isfinite(x))), 1, res, [res], [0])


def pin_constant_mode(A: sp.csr_matrix, b: np.ndarray, row: int = 0, value: float = 0.0):
    """Replace one row by ``u_row = value`` to remove the constant null space."""
    A = sp.lil_matrix(A)
    A.rows[row] = [row]
    A.data[row] = [1.0]
    b = np.array(b, dtype=float)
    b[row] = value
    return as_csr(A), b


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["iter", "relative_residual"])
        for i, r in enumerate(history):
            out.writerow([i, repr(float(r))])
