"""Patch errors, growth factors, monotonicity verdicts and convergence studies."""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .discretization import (
    ROW_DIRICHLET,
    ROW_SCHEME,
    BoundarySpec,
    MobilityField,
    Scheme,
    SparseSystem,
    apply_boundary,
    assemble,
)
from .kernel import CorrectionState, KernelGradientOption, build_corrections, pair_geometry
from .linalg import SolveResult, SolverConfig, relative_residual, solve
from .particles import (
    DIRICHLET,
    Domain,
    NeighborTable,
    ParticleSet,
    build_uniform_grid,
    find_neighbors,
    perturb,
    set_boundary_tags,
)
from .reference import (
    SeriesSolution,
    TestField,
    TestMobility,
    analytic_operator,
    dirichlet_reference,
    evaluate_series,
)

# -- norms -------------------------------------------------------------------


def volume_norm(values, volumes, mask=None, p: float = 2.0) -> float:
    """``(sum V |f|^p)^(1/p)`` over the selected particles."""
    v = np.abs(np.asarray(values, dtype=float))
    vol = np.asarray(volumes, dtype=float)
    if mask is not None:
        v, vol = v[mask], vol[mask]
    return float(np.sum(vol * v**p) ** (1.0 / p))


def averaged_l2(values, volumes, mask=None) -> float:
    """Volume-averaged L2 magnitude, ``[sum V f^2 / sum V]^(1/2)``."""
    vol = np.asarray(volumes, dtype=float)
    v = np.asarray(values, dtype=float)
    if mask is not None:
        v, vol = v[mask], vol[mask]
    if vol.size == 0:
        return 0.0
    return float(np.sqrt(np.sum(vol * v**2) / np.sum(vol)))


def relative_error(volumes, exact, approx, mask=None) -> float:
    """Volume-averaged L2 norm of the pointwise relative error ``(u - <u>) / u``.

    Where the reference is exactly zero (imposed zero data) the absolute
    difference is used instead, which is zero on Dirichlet particles.
    """
    exact = np.asarray(exact, dtype=float)
    diff = exact - np.asarray(approx, dtype=float)
    zero = exact == 0.0
    rel = np.where(zero, diff, diff / np.where(zero, 1.0, exact))
    return averaged_l2(rel, volumes, mask)


def full_support_mask(ps: ParticleSet, nbrs: NeighborTable | None = None) -> np.ndarray:
    """Interior particles whose whole kernel support lies inside the domain."""
    if ps.domain is None:
        raise ValueError("particle set carries no domain")
    reach = 2.0 * float(ps.smoothing.max())
    lo = ps.positions - ps.domain.lower
    hi = ps.domain.upper - ps.positions
    tol = 1e-9 * ps.spacing
    return ps.interior & np.all(lo >= reach - tol, axis=1) & np.all(hi >= reach - tol, axis=1)


@dataclass
class PatchError:
    exact: np.ndarray
    approx: np.ndarray
    abs_err: np.ndarray
    l2: float  # averaged over all particles
    norm_all: float  # sum-V p-norm over all particles
    norm_interior: float  # sum-V p-norm over interior particles

    def relative(self, mask=None) -> np.ndarray:
        rel = self.abs_err / np.maximum(np.abs(self.exact), 1e-300)
        return rel if mask is None else rel[mask]


def laplacian_patch_error(ps: ParticleSet, system: SparseSystem | sp.spmatrix, u: TestField,
                          m: TestMobility, p: float = 2.0) -> PatchError:
    """Compare ``div(m grad u)`` with the discrete operator applied to ``u``.

    The assembled matrix approximates ``-div(M grad u)``, so the discrete
    value is ``-(A u)``.
    """
    A = system.A if isinstance(system, SparseSystem) else system
    exact = analytic_operator(u, m, ps.positions)
    approx = -(A @ u.value(ps.positions))
    err = np.abs(exact - approx)
    return PatchError(exact, approx, err, averaged_l2(err, ps.volumes), volume_norm(err, ps.volumes, None, p),
                      volume_norm(err, ps.volumes, ps.interior, p))


# -- von Neumann growth factors --------------------------------------------------


@dataclass(frozen=True)
class GrowthFactorSample:
    particle: int
    k: np.ndarray
    lam: complex
    tau: float


@dataclass
class GrowthFactors:
    k: np.ndarray  # (K, dim)
    particles: np.ndarray  # (P,)
    lam: np.ndarray  # (K, P) complex
    tau: float

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.lam))) if self.lam.size else 0.0

    def max_imag(self) -> float:
        return float(np.max(np.abs(self.lam.imag))) if self.lam.size else 0.0

    def samples(self):
        for a, k in enumerate(self.k):
            for b, j in enumerate(self.particles):
                yield GrowthFactorSample(int(j), k, complex(self.lam[a, b]), self.tau)


def wavevector_grid(dim: int, spacing: float, count: int = 16) -> np.ndarray:
    """``count^dim`` wavevectors on ``[0, pi / spacing]^dim``."""
    axis = np.linspace(0.0, np.pi / spacing, count)
    grids = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def von_neumann_growth(ps: ParticleSet, system: SparseSystem | sp.spmatrix, tau: float, wavevectors,
                       particles=None) -> GrowthFactors:
    """``lambda_j = 1 + tau exp(-i k.r_j) (L exp(i k.r))_j`` with ``L = -A``.

    Uses the pure operator (no boundary rows); by default only interior
    particles are reported.
    """
    A = system.A if isinstance(system, SparseSystem) else sp.csr_matrix(system)
    k = np.atleast_2d(np.asarray(wavevectors, dtype=float))
    rows = np.flatnonzero(ps.interior) if particles is None else np.asarray(particles)
    phase = np.exp(1j * (ps.positions @ k.T))  # (N, K)
    Lw = -(A @ phase)
    lam = 1.0 + tau * (np.conj(phase[rows]) * Lw[rows])
    return GrowthFactors(k, rows, lam.T, float(tau))


# -- monotonicity -------------------------------------------------------------


@dataclass
class MonotonicityVerdict:
    sign_pattern_ok: bool
    inverse_positive: bool | None
    offending_pairs: list = field(default_factory=list)
    singular: bool = False
    min_inverse_entry: float | None = None

    @property
    def monotone(self) -> bool:
        return self.sign_pattern_ok and bool(self.inverse_positive)


def monotonicity_check(system: SparseSystem | sp.spmatrix, dense_threshold: int = 2000, rows=None,
                       tol: float = 1e-12) -> MonotonicityVerdict:
    """Sign pattern of the scanned rows plus, for small systems, a dense inverse check.

    Rows default to every non-Dirichlet row of a ``SparseSystem`` (all rows of
    a bare matrix). Off-diagonal entries above ``tol`` times the row
    diagonal count as offending.
    """
    if isinstance(system, SparseSystem):
        A = system.A
        if rows is None:
            rows = np.flatnonzero(system.row_kind != ROW_DIRICHLET)
    else:
        A = sp.csr_matrix(system)
    n = A.shape[0]
    rows = np.arange(n) if rows is None else np.asarray(rows)
    A = sp.csr_matrix(A)
    offending = []
    diag = A.diagonal()
    for i in rows:
        i = int(i)
        if diag[i] <= 0:
            offending.append((i, i, float(diag[i])))
        lo, hi = A.indptr[i], A.indptr[i + 1]
        for j, v in zip(A.indices[lo:hi], A.data[lo:hi]):
            if j != i and v > tol * abs(diag[i]):
                offending.append((i, int(j), float(v)))
    verdict = MonotonicityVerdict(not offending, None, offending)
    if n <= dense_threshold:
        dense = A.toarray()
        try:
            inv = np.linalg.inv(dense)
            if not np.all(np.isfinite(inv)) or np.linalg.cond(dense) > 1e14:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            verdict.singular = True
            verdict.inverse_positive = False
            return verdict
        verdict.min_inverse_entry = float(inv.min())
        verdict.inverse_positive = bool(inv.min() >= -tol * np.abs(inv).max())
    return verdict


def maximum_principle_holds(u, boundary_values, rows=None, tol: float = 1e-10) -> bool:
    lo, hi = float(np.min(boundary_values)), float(np.max(boundary_values))
    u = np.asarray(u)
    if rows is not None:
        u = u[rows]
    span = max(hi - lo, 1.0)
    return bool(np.all(u >= lo - tol * span) and np.all(u <= hi + tol * span))


# -- boundary value problems ---------------------------------------------------

DIRICHLET_PSI = (1.0, 0.0, 0.0, 0.0)  # unit value on y = 0, zero elsewhere
MIXED_PSI = (150.0, 90.0, 150.0, 200.0)
REFERENCE_CELLS = 513


@dataclass(frozen=True)
class BVPConfig:
    """One particle BVP on the unit square.

    ``bc`` is ``dirichlet`` (four constant edge values) or ``mixed``
    (value on y = 0, outward fluxes on the other edges).
    """

    bc: str = "dirichlet"
    scheme: str = "msph"
    option: str = "plain"
    f: float = 1.001
    n_per_dim: int = 20
    amplitude: float = 0.0
    seed: int = 0
    realization: int = 0
    psi: tuple | None = None
    solver: SolverConfig = SolverConfig(preconditioner="ilu0")

    def __post_init__(self):
        if self.bc not in ("dirichlet", "mixed"):
            raise ValueError(f"unknown boundary problem {self.bc!r}")
        if self.n_per_dim < 2:
            raise ValueError("n_per_dim must be >= 2")
        if self.f <= 0:
            raise ValueError("f must be positive")
        Scheme.parse(self.scheme)
        KernelGradientOption.parse(self.option)

    @property
    def boundary_data(self) -> tuple:
        if self.psi is not None:
            return tuple(float(v) for v in self.psi)
        return DIRICHLET_PSI if self.bc == "dirichlet" else MIXED_PSI

    @property
    def dof(self) -> int:
        return self.n_per_dim**2


@dataclass
class BVPResult:
    config: BVPConfig
    ps: ParticleSet
    system: SparseSystem
    solution: SolveResult
    reference: np.ndarray
    error: float
    corrections: CorrectionState

    @property
    def u(self) -> np.ndarray:
        return self.solution.x


UNIT_SQUARE = Domain.from_bounds([0.0, 0.0], [1.0, 1.0])


def bvp_particles(cfg: BVPConfig) -> ParticleSet:
    ps = build_uniform_grid(UNIT_SQUARE, cfg.n_per_dim, cfg.f)
    if cfg.bc == "mixed":
        ps = set_boundary_tags(ps, {"x-": "neumann", "x+": "neumann", "y+": "neumann"})
    if cfg.amplitude > 0:
        ps = perturb(ps, cfg.amplitude, cfg.seed, cfg.realization)
    return ps


def _edge_membership(ps: ParticleSet) -> np.ndarray:
    """(N, 4) edge flags in the order y = 0, x = L, y = H, x = 0."""
    x, y = ps.positions[:, 0], ps.positions[:, 1]
    lo, hi = ps.domain.lower, ps.domain.upper
    tol = 1e-9
    return np.stack([np.abs(y - lo[1]) <= tol, np.abs(x - hi[0]) <= tol, np.abs(y - hi[1]) <= tol,
                     np.abs(x - lo[0]) <= tol], axis=1)


_EDGE_NORMALS = np.array([[0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])


def bvp_boundary(ps: ParticleSet, cfg: BVPConfig) -> BoundarySpec:
    """Edge values (corners take the mean of their two edges) and edge fluxes."""
    psi = np.asarray(cfg.boundary_data)
    edges = _edge_membership(ps)
    spec = BoundarySpec()
    for i in np.flatnonzero(ps.boundary):
        on = edges[i]
        if ps.tags[i] == DIRICHLET:
            if cfg.bc == "dirichlet":
                spec.dirichlet[int(i)] = float(psi[on].mean())
            else:
                spec.dirichlet[int(i)] = float(psi[0])
        else:
            # flux along the particle normal from the outward edge derivatives
            spec.neumann[int(i)] = float(np.sum((_EDGE_NORMALS[on] @ ps.normals[i]) * psi[on]))
    return spec


@functools.lru_cache(maxsize=8)
def _dirichlet_reference(psi: tuple, cells: int):
    return dirichlet_reference(psi, cells=cells)


def bvp_reference(ps: ParticleSet, cfg: BVPConfig, cells: int = REFERENCE_CELLS) -> np.ndarray:
    if cfg.bc == "dirichlet":
        psi = cfg.boundary_data
        if psi[2] == 0.0:
            # the printed series is exact when the y = H datum vanishes
            ref = evaluate_series(SeriesSolution("dirichlet", psi=psi), ps.positions)
        else:
            ref = _dirichlet_reference(psi, cells).interpolate(ps.positions)
        # edge and corner particles carry exactly the imposed data
        spec = bvp_boundary(ps, cfg)
        for i, v in spec.dirichlet.items():
            ref[i] = v
        return ref
    return evaluate_series(SeriesSolution("mixed", psi=cfg.boundary_data), ps.positions)


def build_bvp(cfg: BVPConfig, mobility=None):
    ps = bvp_particles(cfg)
    nbrs = find_neighbors(ps)
    geo = pair_geometry(ps, nbrs)
    corr = build_corrections(ps, nbrs, KernelGradientOption.parse(cfg.option), geo)
    mob = MobilityField.uniform(ps) if mobility is None else mobility(ps)
    system = assemble(Scheme.parse(cfg.scheme), ps, nbrs, corr, mob, geo)
    system = apply_boundary(system, ps, nbrs, corr, mob, bvp_boundary(ps, cfg), geo)
    return ps, nbrs, corr, system


class NonConvergence(RuntimeError):
    def __init__(self, message, result: SolveResult | None = None):
        super().__init__(message)
        self.result = result


def solve_bvp(cfg: BVPConfig, reference: bool = True) -> BVPResult:
    ps, nbrs, corr, system = build_bvp(cfg)
    res = solve(system.A, system.b, cfg.solver)
    if not res.converged:
        raise NonConvergence(f"solver stopped at relative residual {res.residual:.3e} after {res.iterations} "
                             f"iterations (dof={cfg.dof}, scheme={cfg.scheme})", res)
    ref = bvp_reference(ps, cfg) if reference else np.full(ps.n, np.nan)
    err = relative_error(ps.volumes, ref, res.x) if reference else float("nan")
    return BVPResult(cfg, ps, system, res, ref, err, corr)


# -- convergence studies ---------------------------------------------------------

SATURATION_RATIO = 1.3


@dataclass
class ConvergenceRow:
    dof: int
    error: float
    mean: float
    std: float
    order: float | None = None
    saturated: bool = False
    errors: list = field(default_factory=list)


def dof_to_n(dof: int, dim: int = 2) -> int:
    n = round(dof ** (1.0 / dim))
    if n**dim != dof:
        raise ValueError(f"dof {dof} is not a perfect power for dimension {dim}")
    return n


def observed_order(e_prev: float, e_cur: float, dof_prev: int, dof_cur: int, dim: int = 2) -> float:
    """Order with respect to spacing: ``log(e_prev / e_cur) / log(h_prev / h_cur)``."""
    ratio = (dof_cur / dof_prev) ** (1.0 / dim)
    return math.log(e_prev / e_cur) / math.log(ratio)


def convergence_study(cfg: BVPConfig, ladder, realizations: int = 1, seed: int | None = None) -> list[ConvergenceRow]:
    """Errors along a DoF ladder; ``realizations > 1`` reports mean and std."""
    ladder = [int(d) for d in ladder]
    if any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("dof ladder must be strictly increasing")
    seed = cfg.seed if seed is None else seed
    rows: list[ConvergenceRow] = []
    for dof in ladder:
        errs = []
        for r in range(realizations):
            c = replace(cfg, n_per_dim=dof_to_n(dof), seed=seed, realization=r)
            errs.append(solve_bvp(c).error)
        errs = np.asarray(errs)
        mean = float(errs.mean())
        std = float(errs.std(ddof=1)) if errs.size > 1 else 0.0
        row = ConvergenceRow(dof, mean, mean, std, errors=errs.tolist())
        if rows:
            prev = rows[-1]
            row.order = observed_order(prev.error, row.error, prev.dof, dof)
            row.saturated = prev.error / row.error < SATURATION_RATIO
        rows.append(row)
    return rows


# -- CSV output ------------------------------------------------------------------


def write_growth_csv(g: GrowthFactors, path) -> None:
    dim = g.k.shape[1]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow([f"k_{a}" for a in "xyz"[:dim]] + ["particle", "re", "im", "abs"])
        for a, k in enumerate(g.k):
            for b, j in enumerate(g.particles):
                lam = g.lam[a, b]
                out.writerow([repr(float(v)) for v in k] + [int(j), repr(lam.real), repr(lam.imag), repr(abs(lam))])


def write_convergence_csv(rows: list[ConvergenceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["dof", "error", "mean", "std", "order"])
        for r in rows:
            out.writerow([r.dof, repr(r.error), repr(r.mean), repr(r.std), "" if r.order is None else repr(r.order)])


def write_patch_csv(ps: ParticleSet, err: PatchError, path) -> None:
    dim = ps.dim
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(list("xyz"[:dim]) + ["exact", "approx", "abs_err"])
        for i in range(ps.n):
            out.writerow([repr(float(v)) for v in ps.positions[i]] +
                         [repr(float(err.exact[i])), repr(float(err.approx[i])), repr(float(err.abs_err[i]))])


