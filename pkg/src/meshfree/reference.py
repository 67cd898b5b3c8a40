"""Ground truth for the meshless operators.

Closed-form ``div(m grad u)`` for the polynomial patch fields, separable
series solutions on rectangles, a cell-centered two-point flux solver on
axis-aligned rasters, loop-based row oracles and lognormal permeability rasters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator
from scipy.ndimage import uniform_filter

from .discretization import TRACE_ZERO, CellFace, MobilityField, Scheme, tpfa_transmissibility
from .kernel import CorrectionState
from .particles import NeighborTable, ParticleSet, realization_rng

# -- analytic operators ------------------------------------------------------

FIELDS = ("sum", "prod")
MOBILITIES = ("one", "linear", "power")


@dataclass(frozen=True)
class TestField:
    """``sum``: u = sum_i x_i^s. ``prod``: u = prod_i x_i^{m_i}."""

    __test__ = False  # not a pytest class

    kind: str = "sum"
    power: float = 2.0
    exponents: tuple = ()

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.kind == "sum":
            return np.sum(x**self.power, axis=1)
        if self.kind == "prod":
            return np.prod(x ** np.asarray(self._exps(x.shape[1])), axis=1)
        raise ValueError(f"unsupported field {self.kind!r}")

    def _exps(self, dim):
        e = tuple(self.exponents) or (self.power,) * dim
        if len(e) != dim:
            raise ValueError("exponent count must match dimension")
        return e

    def grad(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.kind == "sum":
            return _dpow(x, self.power, 1)
        e = np.asarray(self._exps(x.shape[1]), dtype=float)
        out = np.empty_like(x)
        for a in range(x.shape[1]):
            others = np.prod(np.delete(x, a, axis=1) ** np.delete(e, a), axis=1)
            out[:, a] = _dpow(x[:, a], e[a], 1) * others
        return out

    def hess_diag(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.kind == "sum":
            return _dpow(x, self.power, 2)
        e = np.asarray(self._exps(x.shape[1]), dtype=float)
        out = np.empty_like(x)
        for a in range(x.shape[1]):
            others = np.prod(np.delete(x, a, axis=1) ** np.delete(e, a), axis=1)
            out[:, a] = _dpow(x[:, a], e[a], 2) * others
        return out


@dataclass(frozen=True)
class TestMobility:
    """``one``: m = 1. ``linear``: m = sum_i x_i. ``power``: m = sum_i x_i^p."""

    __test__ = False

    kind: str = "one"
    power: float = 1.0

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.kind == "one":
            return np.ones(x.shape[0])
        if self.kind == "linear":
            return np.sum(x, axis=1)
        if self.kind == "power":
            return np.sum(x**self.power, axis=1)
        raise ValueError(f"unsupported mobility {self.kind!r}")

    def grad(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.kind == "one":
            return np.zeros_like(x)
        if self.kind == "linear":
            return np.ones_like(x)
        if self.kind == "power":
            return _dpow(x, self.power, 1)
        raise ValueError(f"unsupported mobility {self.kind!r}")


def _dpow(x, p: float, order: int):
    """``d^order/dx^order x^p`` with the vanishing cases kept exactly zero."""
    x = np.asarray(x, dtype=float)
    if order == 1:
        return np.zeros_like(x) if p == 0 else p * x ** (p - 1)
    if p in (0, 1):
        return np.zeros_like(x)
    return p * (p - 1) * x ** (p - 2)


def analytic_operator(u: TestField, m: TestMobility, x) -> np.ndarray:
    """``div(m grad u) = sum_a (dm/dx_a du/dx_a + m d2u/dx_a2)`` at each point."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.sum(m.grad(x) * u.grad(x), axis=1) + m.value(x) * np.sum(u.hess_diag(x), axis=1)


def parse_field(text: str) -> TestField:
    """``quadratic``, ``cubic``, ``linear``, ``sum:<s>``, ``prod:<m1>,<m2>``."""
    named = {"linear": 1.0, "quadratic": 2.0, "cubic": 3.0, "quartic": 4.0}
    if text in named:
        return TestField("sum", named[text])
    kind, _, arg = text.partition(":")
    if kind == "sum":
        return TestField("sum", float(arg))
    if kind == "prod":
        exps = tuple(float(v) for v in arg.split(","))
        return TestField("prod", exps[0], exps if len(exps) > 1 else ())
    raise ValueError(f"unsupported field {text!r}")


def parse_mobility(text: str) -> TestMobility:
    """``one``, ``linear`` or ``power:<p>``."""
    kind, _, arg = text.partition(":")
    if kind in ("one", "1", "uniform"):
        return TestMobility("one")
    if kind == "linear":
        return TestMobility("linear")
    if kind == "power":
        return TestMobility("power", float(arg))
    raise ValueError(f"unsupported mobility {text!r}")


# -- series solutions --------------------------------------------------------

SERIES_CAP = 10000


@dataclass(frozen=True)
class SeriesSolution:
    """Laplace solution on ``[0, L] x [0, H]`` offset by ``origin``.

    ``psi`` holds the data on y = 0, x = L, y = H, x = 0 in that order.
    For ``mixed`` the first entry is a value and the others are outward
    normal derivatives; for ``dirichlet`` all four are values.
    """

    kind: str
    L: float = 1.0
    H: float = 1.0
    psi: tuple = (0.0, 0.0, 0.0, 0.0)
    n_terms: int = SERIES_CAP
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("dirichlet", "mixed"):
            raise ValueError(f"unknown series kind {self.kind!r}")
        if self.n_terms < 1:
            raise ValueError("n_terms must be >= 1")


def _sinh_ratio(a, num, den):
    """``sinh(a num) / sinh(a den)`` for ``0 <= num <= den`` without overflow."""
    return np.exp(a * (num - den)) * -np.expm1(-2 * a * num) / -np.expm1(-2 * a * den)


def _cosh_sinh_ratio(a, num, den):
    """``cosh(a num) / sinh(a den)``."""
    return np.exp(a * (num - den)) * (1 + np.exp(-2 * a * num)) / -np.expm1(-2 * a * den)


def _dirichlet_terms(sol: SeriesSolution, x, y, n):
    """Terms of the printed four-edge series for odd ``n`` (column vector)."""
    L, H = sol.L, sol.H
    p1, p2, p3, p4 = sol.psi
    a, b = n * np.pi / L, n * np.pi / H
    c = 4.0 / (n * np.pi)
    t = p1 * c * np.sin(a * x) * _sinh_ratio(a, H - y, H)
    t = t + p2 * c * np.sin(b * y) * _sinh_ratio(b, x, L)
    t = t + p3 * c * np.sin(b * y) * _sinh_ratio(b, x, L)  # as printed; duplicates the x = L term
    t = t + p4 * c * np.sin(b * y) * _sinh_ratio(b, L - x, L)
    return t


def _mixed_terms(sol: SeriesSolution, x, y, n):
    L, H = sol.L, sol.H
    _, p2, _, p4 = sol.psi
    lam = (2 * n - 1) * np.pi / (2 * H)
    # sin(lam y) rather than sinh: only the sine satisfies Laplace with the cosh factors
    coef = (2 * p2 * _cosh_sinh_ratio(lam, x, L) + 2 * p4 * _cosh_sinh_ratio(lam, L - x, L)) / (H * lam**2)
    return coef * np.sin(lam * y)


def evaluate_series(sol: SeriesSolution, points, return_flags: bool = False, rtol: float = 1e-12):
    """Truncated series at ``points`` (shape (2,) or (P, 2)).

    Terms are summed in blocks until the block's largest term falls below
    ``rtol`` times the running sum, or ``sol.n_terms`` is reached. Points that
    hit the cap are flagged (typically edge points of a discontinuous datum).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x = pts[:, 0] - sol.origin[0]
    y = pts[:, 1] - sol.origin[1]
    if sol.kind == "mixed":
        base = sol.psi[0] + sol.psi[2] * y
        terms = _mixed_terms
        step = 1
    else:
        base = np.zeros_like(x)
        terms = _dirichlet_terms
        step = 2
    total = base.copy()
    active = np.ones(x.size, dtype=bool)
    block = 64
    k = 0
    while k < sol.n_terms and np.any(active):
        idx = np.arange(k, min(k + block, sol.n_terms))
        n = (step * idx + 1.0) if step == 2 else idx + 1.0
        t = terms(sol, x[active, None], y[active, None], n[None, :])
        total[active] += t.sum(axis=1)
        small = np.max(np.abs(t), axis=1) <= rtol * np.maximum(np.abs(total[active]), 1e-300)
        act_idx = np.flatnonzero(active)
        active[act_idx[small]] = False
        k += block
    flags = active
    out = total if pts.shape[0] > 1 or np.ndim(points) > 1 else float(total[0])
    return (out, flags) if return_flags else out


def series_self_check(sol: SeriesSolution, inset: float = 1e-3, samples: int = 7) -> float:
    """Largest relative mismatch between the series and its boundary data.

    Evaluated just inside each edge, away from the corners. For the mixed
    kind only the Dirichlet base and the flux edges (by one-sided differences)
    are checked.
    """
    L, H = sol.L, sol.H
    s = np.linspace(0.2, 0.8, samples)
    scale = max(max(abs(p) for p in sol.psi), 1e-300)
    x0, y0 = sol.origin
    if sol.kind == "dirichlet":
        edges = [
            (np.c_[s * L, np.full_like(s, inset)], sol.psi[0]),
            (np.c_[np.full_like(s, L - inset), s * H], sol.psi[1]),
            (np.c_[s * L, np.full_like(s, H - inset)], sol.psi[2]),
            (np.c_[np.full_like(s, inset), s * H], sol.psi[3]),
        ]
        worst = 0.0
        for pts, val in edges:
            v = evaluate_series(sol, pts + [x0, y0])
            worst = max(worst, float(np.max(np.abs(v - val))) / scale)
        return worst
    d = 1e-5
    worst = float(np.max(np.abs(evaluate_series(sol, np.c_[s * L + x0, np.full_like(s, y0)]) - sol.psi[0]))) / scale
    # outward derivative on x = L, y = H, x = 0
    checks = [
        (np.c_[np.full_like(s, L), s * H], np.array([-d, 0.0]), sol.psi[1]),
        (np.c_[s * L, np.full_like(s, H)], np.array([0.0, -d]), sol.psi[2]),
        (np.c_[np.zeros_like(s), s * H], np.array([d, 0.0]), sol.psi[3]),
    ]
    for pts, off, q in checks:
        p = pts + [x0, y0]
        u0 = evaluate_series(sol, p)
        u1 = evaluate_series(sol, p + off)
        u2 = evaluate_series(sol, p + 2 * off)
        dudn = (3 * u0 - 4 * u1 + u2) / (2 * d)
        worst = max(worst, float(np.max(np.abs(dudn - q))) / scale)
    return worst


# -- rasters and the two-point flux solver ------------------------------------


@dataclass(frozen=True)
class RasterField:
    """Cell-centered diagonal permeability on an axis-aligned grid (x fastest)."""

    dims: tuple
    cell_size: tuple
    perm: np.ndarray  # (ncells, dim)
    origin: tuple = ()

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        k = np.asarray(self.perm, dtype=float)
        if k.ndim == 1:
            k = np.repeat(k[:, None], len(dims), axis=1)
        if k.shape != (int(np.prod(dims)), len(dims)):
            raise ValueError(f"permeability shape {k.shape} does not match dims {dims}")
        if np.any(k <= 0):
            raise ValueError("permeability must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "cell_size", tuple(float(h) for h in self.cell_size))
        object.__setattr__(self, "perm", k)
        object.__setattr__(self, "origin", tuple(self.origin) or (0.0,) * len(dims))

    @property
    def dim(self) -> int:
        return len(self.dims)

    @property
    def ncells(self) -> int:
        return int(np.prod(self.dims))

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims) * np.asarray(self.cell_size)

    def centers(self) -> np.ndarray:
        axes = [self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.cell_size[a] for a in range(self.dim)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel(order="F") for g in grids], axis=1)

    def cell_of(self, points) -> np.ndarray:
        """Nearest-cell (piecewise constant) lookup, clipped to the raster."""
        pts = np.atleast_2d(points)
        ijk = np.floor((pts - np.asarray(self.origin)) / np.asarray(self.cell_size)).astype(np.int64)
        ijk = np.clip(ijk, 0, np.asarray(self.dims) - 1)
        strides = np.cumprod((1,) + self.dims[:-1])
        return ijk @ strides

    def sample(self, ps: ParticleSet) -> MobilityField:
        return MobilityField(self.perm[self.cell_of(ps.positions)])

    @classmethod
    def uniform(cls, dims, cell_size, value=1.0, origin=()) -> "RasterField":
        n = int(np.prod(dims))
        return cls(tuple(dims), tuple(cell_size), np.full(n, float(value)), origin)


FACE_NAMES = ("x-", "x+", "y-", "y+", "z-", "z+")


@dataclass
class RasterBC:
    """Per-face condition: ``("dirichlet", value)`` or ``("neumann", outward flux)``.

    Values may be callables of the face-center coordinates. Unlisted faces
    are no-flow.
    """

    faces: dict = field(default_factory=dict)


def _face_value(v, pts):
    return np.asarray(v(pts), dtype=float) if callable(v) else np.full(len(pts), float(v))


def tpfa_system(raster: RasterField, bc: RasterBC, source=None):
    """Assemble ``A u = b`` for ``-div(K grad u) = g`` integrated over cells."""
    dims, h, dim = raster.dims, np.asarray(raster.cell_size), raster.dim
    n = raster.ncells
    idx = np.arange(n).reshape(dims, order="F")
    centers = raster.centers()
    vol = float(np.prod(h))
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    b = np.zeros(n) if source is None else np.asarray(source, dtype=float) * vol
    for a in range(dim):
        area = vol / h[a]
        half = np.zeros(dim)
        half[a] = 0.5 * h[a]
        normal = np.zeros(dim)
        normal[a] = area
        lo = np.take(idx, np.arange(dims[a] - 1), axis=a).ravel()
        hi = np.take(idx, np.arange(1, dims[a]), axis=a).ravel()
        ka, kb = raster.perm[lo], raster.perm[hi]
        # all faces along an axis share geometry, so the harmonic weight is vectorized by hand
        t = 1.0 / (0.5 * h[a] / ka[:, a] / area + 0.5 * h[a] / kb[:, a] / area)
        if lo.size:
            t_check = tpfa_transmissibility(CellFace(half, normal), CellFace(-half, normal), ka[0], kb[0])
            assert np.isclose(t[0], t_check, rtol=1e-12)
        rows += [lo, hi]
        cols += [hi, lo]
        vals += [-t, -t]
        np.add.at(diag, lo, t)
        np.add.at(diag, hi, t)
        for side, layer in (("-", 0), ("+", dims[a] - 1)):
            name = "xyz"[a] + side
            cells = np.take(idx, [layer], axis=a).ravel()
            fc = centers[cells].copy()
            fc[:, a] += -half[a] if side == "-" else half[a]
            kind, val = bc.faces.get(name, ("neumann", 0.0))
            if kind == "dirichlet":
                tb = raster.perm[cells, a] * area / (0.5 * h[a])
                diag[cells] += tb
                b[cells] += tb * _face_value(val, fc)
            elif kind == "neumann":
                b[cells] += area * _face_value(val, fc)
            else:
                raise ValueError(f"unknown face condition {kind!r}")
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A, b


@dataclass
class TPFASolution:
    raster: RasterField
    bc: RasterBC
    values: np.ndarray  # per cell

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.raster.dims, order="F")

    def extended(self):
        """Cell values padded with one layer of face values (for interpolation)."""
        r = self.raster
        h = np.asarray(r.cell_size)
        u = self.grid()
        ext = np.full(tuple(d + 2 for d in r.dims), np.nan)
        inner = tuple(slice(1, -1) for _ in r.dims)
        ext[inner] = u
        centers = r.centers()
        idx = np.arange(r.ncells).reshape(r.dims, order="F")
        axes = []
        for a in range(r.dim):
            c = r.origin[a] + (np.arange(r.dims[a]) + 0.5) * h[a]
            axes.append(np.concatenate([[r.origin[a]], c, [r.origin[a] + r.dims[a] * h[a]]]))
            for side, layer, ghost in (("-", 0, 0), ("+", r.dims[a] - 1, r.dims[a] + 1)):
                cells = np.take(idx, [layer], axis=a).ravel()
                fc = centers[cells].copy()
                fc[:, a] += (-0.5 if side == "-" else 0.5) * h[a]
                kind, val = self.bc.faces.get("xyz"[a] + side, ("neumann", 0.0))
                if kind == "dirichlet":
                    fv = _face_value(val, fc)
                else:
                    fv = self.values[cells] + _face_value(val, fc) * 0.5 * h[a] / r.perm[cells, a]
                sl = [slice(1, -1)] * r.dim
                sl[a] = ghost
                ext[tuple(sl)] = fv.reshape(np.take(u, [layer], axis=a).shape, order="F").squeeze(axis=a)
        # edges and corners: average of the filled axis neighbors
        for _ in range(r.dim):
            missing = np.isnan(ext)
            if not missing.any():
                break
            acc = np.zeros_like(ext)
            cnt = np.zeros_like(ext)
            for a in range(r.dim):
                for s in (1, -1):
                    nb = np.roll(ext, s, axis=a)
                    edge = [slice(None)] * r.dim
                    edge[a] = 0 if s == 1 else -1
                    nb[tuple(edge)] = np.nan
                    ok = ~np.isnan(nb)
                    acc[ok] += nb[ok]
                    cnt[ok] += 1
            fill = missing & (cnt > 0)
            ext[fill] = acc[fill] / cnt[fill]
        return axes, ext

    def interpolate(self, points) -> np.ndarray:
        axes, ext = self.extended()
        f = RegularGridInterpolator(tuple(axes), ext, method="linear", bounds_error=False, fill_value=None)
        return f(np.atleast_2d(points))


def tpfa_solve(raster: RasterField, bc: RasterBC, source=None) -> TPFASolution:
    A, b = tpfa_system(raster, bc, source)
    if not any(kind == "dirichlet" for kind, _ in bc.faces.values()):
        raise ValueError("pure Neumann raster problem is singular; add a Dirichlet face")
    u = spla.splu(sp.csc_matrix(A)).solve(b)
    return TPFASolution(raster, bc, u)


def dirichlet_reference(psi, L=1.0, H=1.0, cells: int = 513, origin=(0.0, 0.0)) -> TPFASolution:
    """Fine-grid two-point flux solution of the four-edge Dirichlet problem, M = I."""
    raster = RasterField.uniform((cells, cells), (L / cells, H / cells), 1.0, origin)
    p1, p2, p3, p4 = psi
    bc = RasterBC({"y-": ("dirichlet", p1), "x+": ("dirichlet", p2), "y+": ("dirichlet", p3),
                   "x-": ("dirichlet", p4)})
    return tpfa_solve(raster, bc)


def lognormal_raster(dims, correlation_length: int, seed: int, sigma: float = 1.0, mean_log: float = 0.0,
                     cell_size=None) -> RasterField:
    """Isotropic lognormal field from box-filtered white noise.

    The filtered noise is rescaled by the theoretical filter variance, so
    ``log K`` has mean ``mean_log`` and standard deviation ``sigma`` in
    distribution (not forced on the sample).
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise ValueError("raster dims must be positive")
    w = max(int(correlation_length), 1)
    rng = realization_rng(seed)
    z = rng.standard_normal(dims)
    z = uniform_filter(z, size=w, mode="wrap") * np.sqrt(float(w) ** len(dims))
    logk = mean_log + sigma * z
    cell_size = cell_size or tuple(1.0 / d for d in dims)
    return RasterField(dims, cell_size, np.exp(logk).ravel(order="F"))


def write_raster(raster: RasterField, path, component: int = 0) -> None:
    with open(path, "w") as fh:
        fh.write(" ".join(str(d) for d in raster.dims) + "\n")
        fh.write(" ".join(repr(h) for h in raster.cell_size) + "\n")
        vals = raster.perm[:, component]
        for start in range(0, vals.size, 8):
            fh.write(" ".join(repr(float(v)) for v in vals[start:start + 8]) + "\n")


def read_raster(paths) -> RasterField:
    """One file (isotropic) or one file per diagonal component."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    comps, dims, size = [], None, None
    for p in paths:
        with open(p) as fh:
            d = tuple(int(v) for v in fh.readline().split())
            hs = tuple(float(v) for v in fh.readline().split())
            vals = np.array(fh.read().split(), dtype=float)
        if len(hs) != len(d):
            raise ValueError(f"{p}: cell size count does not match dims")
        if vals.size != int(np.prod(d)):
            raise ValueError(f"{p}: expected {int(np.prod(d))} values, got {vals.size}")
        if dims is not None and (d != dims or hs != size):
            raise ValueError("component files disagree on grid")
        dims, size = d, hs
        comps.append(vals)
    if len(comps) == 1:
        perm = comps[0]
    elif len(comps) == len(dims):
        perm = np.stack(comps, axis=1)
    else:
        raise ValueError("give one file or one per dimension")
    return RasterField(dims, size, perm)


# -- loop-based row oracle -----------------------------------------------------


def brute_force_row(ps: ParticleSet, nbrs: NeighborTable, corr: CorrectionState, mob: MobilityField,
                    scheme, i: int, u) -> float:
    """``(A u)_I`` by direct summation, with every tensor rebuilt in plain loops.

    The boundary-vector term uses the literal three-gradient bracket
    ``<grad(M u)> - u <grad M> + M <grad u>`` rather than the pairwise form.
    """
    scheme = Scheme.parse(scheme) if isinstance(scheme, str) else scheme
    dim = ps.dim
    xi = ps.positions[i]
    lo, hi = int(nbrs.offsets[i]), int(nbrs.offsets[i + 1])
    g_s = corr.grad_star if corr.option.corrected else corr.grad
    mi = mob.values[i]
    brook = 0.0
    gamma = np.zeros((dim, dim))
    nvec = np.zeros(dim)
    third = np.zeros((dim, dim, dim))
    grad_mu = np.zeros(dim)
    grad_m = np.zeros(dim)
    grad_u = np.zeros(dim)
    for k in range(lo, hi):
        j = int(nbrs.indices[k])
        r = ps.positions[j] - xi
        d2 = float(r @ r)
        vj = ps.volumes[j]
        mj = mob.values[j]
        g = g_s[k]
        gs = corr.grad_star[k]
        radial = 0.0
        for a in range(dim):
            radial += r[a] * (mi[a] + mj[a]) * g[a]
        brook += vj * (u[j] - u[i]) * radial / d2
        rg = float(r @ g) / d2
        for a in range(dim):
            nvec[a] += vj * r[a] * rg
            grad_mu[a] += vj * (mj[a] * u[j] - mi[a] * u[i]) * gs[a]
            grad_m[a] += vj * (mj[a] - mi[a]) * gs[a]
            grad_u[a] += vj * (u[j] - u[i]) * gs[a]
            for b in range(dim):
                gamma[a, b] += vj * rg * r[a] * r[b]
                for c in range(dim):
                    third[a, b, c] += vj * r[a] * r[b] * gs[c]
    orientation = 1.0 if corr.option.corrected else -1.0
    tr = float(np.trace(gamma))
    tr_max = float(np.max(np.abs(np.trace(corr.Gamma, axis1=1, axis2=2)), initial=0.0))
    if scheme is Scheme.CB:
        scale = dim / tr if abs(tr) > TRACE_ZERO * tr_max else orientation
        return -scale * brook
    bracket = 0.0
    for a in range(dim):
        bracket += nvec[a] * (grad_mu[a] - u[i] * grad_m[a] + mi[a] * grad_u[a])
    if scheme is Scheme.S:
        t = tr
        tr_ref = tr_max
    else:
        gstar = gamma - np.einsum("g,abg->ab", nvec, third)
        t = float(np.trace(gstar))
        tr_ref = float(np.max(np.abs(np.trace(corr.GammaStar, axis1=1, axis2=2)), initial=0.0))
        if abs(t) <= TRACE_ZERO * tr_ref:
            t, tr_ref = tr, tr_max
    if abs(t) <= TRACE_ZERO * tr_ref or corr.singular[i]:
        return -orientation * brook
    return -(dim / t) * (brook - bracket)
