"""Sparse assembly of the meshless operators approximating -div(M grad u).

Every interior row has the two-point form

    (A u)_I = sum_J V_J T_IJ (u_I - u_J)

so constant fields are annihilated up to roundoff. The three schemes only
differ in the pair weight ``T_IJ`` and the per-row scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .kernel import CorrectionState, PairGeometry, pair_geometry, pair_index
from .particles import DIRICHLET, INTERIOR, NEUMANN, NeighborTable, ParticleSet

ROW_SCHEME = 0
ROW_DIRICHLET = 1
ROW_NEUMANN = 2

TRACE_ZERO = 1e-10


class Scheme(str, Enum):
    CB = "cbsph"  # Brookshaw with trace multiplier
    S = "ssph"  # Brookshaw plus boundary-vector correction, Gamma scaling
    M = "msph"  # two-point form with Gamma-star scaling
    TPFA = "tpfa"

    @classmethod
    def parse(cls, text: str) -> "Scheme":
        aliases = {"cb": "cbsph", "brookshaw": "cbsph", "s": "ssph", "schwaiger": "ssph",
                   "m": "msph", "new": "msph"}
        return cls(aliases.get(text.lower(), text.lower()))


@dataclass(frozen=True)
class MobilityField:
    """Diagonal mobility tensor sampled per particle, shape (N, dim)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("mobility values must be (N, dim)")
        if np.any(v < 0):
            raise ValueError("mobility must be non-negative")
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, ps: ParticleSet, value: float = 1.0) -> "MobilityField":
        return cls(np.full((ps.n, ps.dim), float(value)))

    @classmethod
    def scalar(cls, ps: ParticleSet, values) -> "MobilityField":
        v = np.broadcast_to(np.asarray(values, dtype=float), (ps.n,))
        return cls(np.repeat(v[:, None], ps.dim, axis=1))

    @classmethod
    def from_function(cls, ps: ParticleSet, func: Callable[[np.ndarray], np.ndarray]) -> "MobilityField":
        """``func`` maps (N, dim) positions to (N,) scalars or (N, dim) diagonals."""
        v = np.asarray(func(ps.positions), dtype=float)
        if v.ndim == 1:
            return cls.scalar(ps, v)
        return cls(v)

    @property
    def is_scalar(self) -> bool:
        return bool(np.all(self.values == self.values[:, :1]))


@dataclass
class SparseSystem:
    A: sp.csr_matrix
    b: np.ndarray
    row_kind: np.ndarray
    fallback_rows: list[int] = field(default_factory=list)
    scheme: str = ""

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def copy(self) -> "SparseSystem":
        return SparseSystem(self.A.copy(), self.b.copy(), self.row_kind.copy(), list(self.fallback_rows), self.scheme)


@dataclass(frozen=True)
class Transmissibility:
    pair: tuple[int, int]
    value: float
    parts: tuple[float, float]  # (radial flux term, boundary-vector correction term), before scaling


# -- pair weights ------------------------------------------------------------


def _radial_weight(geo: PairGeometry, grad: np.ndarray, msum: np.ndarray) -> np.ndarray:
    """``r . (M_I + M_J) grad / |r|^2`` per pair."""
    return np.einsum("pd,pd,pd->p", geo.r, msum, grad) / geo.dist**2


def _correction_weight(nvec: np.ndarray, geo: PairGeometry, grad_star: np.ndarray, msum: np.ndarray) -> np.ndarray:
    """``N . (M_I + M_J) grad*`` per pair."""
    return np.einsum("pd,pd,pd->p", nvec[geo.rows], msum, grad_star)


def _orientation(corr: CorrectionState) -> float:
    # sign of the radial tensor trace for a full support: -n uncorrected, +n corrected
    return 1.0 if corr.option.corrected else -1.0


def _trace(t: np.ndarray) -> np.ndarray:
    return np.trace(t, axis1=1, axis2=2)


def _scale_from_trace(tr: np.ndarray, dim: int) -> tuple[np.ndarray, np.ndarray]:
    ok = np.abs(tr) > TRACE_ZERO * np.max(np.abs(tr), initial=0.0)
    scale = np.zeros_like(tr)
    scale[ok] = dim / tr[ok]
    return scale, ok


def _build(ps: ParticleSet, geo: PairGeometry, scale: np.ndarray, weight: np.ndarray, name: str,
           fallback: np.ndarray) -> SparseSystem:
    # (A u)_I = -scale_I sum_J V_J weight_IJ (u_J - u_I)
    c = -scale[geo.rows] * geo.vol_j * weight
    diag = -np.bincount(geo.rows, weights=c, minlength=ps.n)
    rows = np.concatenate([geo.rows, np.arange(ps.n)])
    cols = np.concatenate([geo.cols, np.arange(ps.n)])
    vals = np.concatenate([c, diag])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(ps.n, ps.n))
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return SparseSystem(A, np.zeros(ps.n), np.full(ps.n, ROW_SCHEME, dtype=np.int8),
                        sorted(np.flatnonzero(fallback).tolist()), name)


def _msum(geo: PairGeometry, mob: MobilityField) -> np.ndarray:
    return mob.values[geo.rows] + mob.values[geo.cols]


def assemble_brookshaw(ps: ParticleSet, nbrs: NeighborTable, corr: CorrectionState, mob: MobilityField,
                       corrected_multiplier: bool = True, geo: PairGeometry | None = None) -> SparseSystem:
    """Brookshaw operator, optionally scaled by ``n / trace(Gamma)``."""
    geo = geo or pair_geometry(ps, nbrs)
    weight = _radial_weight(geo, corr.scheme_grad, _msum(geo, mob))
    plain = np.full(ps.n, _orientation(corr))
    if not corrected_multiplier:
        return _build(ps, geo, plain, weight, "brookshaw", np.zeros(ps.n, bool))
    scale, ok = _scale_from_trace(_trace(corr.Gamma), ps.dim)
    scale = np.where(ok, scale, plain)
    return _build(ps, geo, scale, weight, Scheme.CB.value, ~ok)


def _corrected_weight(geo: PairGeometry, corr: CorrectionState, mob: MobilityField) -> np.ndarray:
    msum = _msum(geo, mob)
    return (_radial_weight(geo, corr.scheme_grad, msum)
            - _correction_weight(corr.Nscheme, geo, corr.grad_star, msum))


def assemble_schwaiger(ps: ParticleSet, nbrs: NeighborTable, corr: CorrectionState, mob: MobilityField,
                       geo: PairGeometry | None = None) -> SparseSystem:
    """Brookshaw term minus the boundary-vector term, scaled by ``n / trace(Gamma)``.

    The three gradient terms multiplying N are summed in pairwise-difference
    form, ``sum_J V_J (m_I + m_J)(u_J - u_I) grad*``, which is algebraically
    identical and keeps the row sum at zero.
    """
    geo = geo or pair_geometry(ps, nbrs)
    weight = _corrected_weight(geo, corr, mob)
    scale, ok = _scale_from_trace(_trace(corr.Gamma), ps.dim)
    ok &= ~corr.singular
    if np.any(~ok):
        plain = _radial_weight(geo, corr.scheme_grad, _msum(geo, mob))
        bad = ~ok[geo.rows]
        weight = np.where(bad, plain, weight)
        scale = np.where(ok, scale, _orientation(corr))
    return _build(ps, geo, scale, weight, Scheme.S.value, ~ok)


def gamma_bar_scale(corr: CorrectionState, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row ``n / trace(Gamma_bar)`` and a mask of rows where both traces vanish."""
    tr_star = _trace(corr.GammaStar)
    tr = _trace(corr.Gamma)
    s_star, ok_star = _scale_from_trace(tr_star, dim)
    s_plain, ok_plain = _scale_from_trace(tr, dim)
    scale = np.where(ok_star, s_star, s_plain)
    ok = ok_star | ok_plain
    return scale, ok


def assemble_new(ps: ParticleSet, nbrs: NeighborTable, corr: CorrectionState, mob: MobilityField,
                 geo: PairGeometry | None = None) -> SparseSystem:
    """Two-point scheme scaled by ``n / trace(Gamma_bar)``."""
    geo = geo or pair_geometry(ps, nbrs)
    weight = _corrected_weight(geo, corr, mob)
    scale, ok = gamma_bar_scale(corr, ps.dim)
    ok &= ~corr.singular
    if np.any(~ok):
        plain = _radial_weight(geo, corr.scheme_grad, _msum(geo, mob))
        bad = ~ok[geo.rows]
        weight = np.where(bad, plain, weight)
        scale = np.where(ok, scale, _orientation(corr))
    return _build(ps, geo, scale, weight, Scheme.M.value, ~ok)


def assemble(scheme: Scheme | str, ps: ParticleSet, nbrs: NeighborTable, corr: CorrectionState,
             mob: MobilityField, geo: PairGeometry | None = None) -> SparseSystem:
    scheme = Scheme.parse(scheme) if isinstance(scheme, str) else scheme
    if scheme is Scheme.CB:
        return assemble_brookshaw(ps, nbrs, corr, mob, True, geo)
    if scheme is Scheme.S:
        return assemble_schwaiger(ps, nbrs, corr, mob, geo)
    if scheme is Scheme.M:
        return assemble_new(ps, nbrs, corr, mob, geo)
    raise ValueError("TPFA is assembled on rasters, see meshfree.reference.tpfa_solve")


def pair_transmissibility(ps: ParticleSet, nbrs: NeighborTable, corr: CorrectionState, mob: MobilityField,
                          i: int, j: int, scheme: Scheme | str = Scheme.M) -> Transmissibility:
    """Scaled transmissibility ``T(r_J, r_I)``; the assembled entry A[I, J] is ``-V_J T``.

    For a diagonal mobility the pair mobility sum enters componentwise, so the
    parts are reported with ``(M_I + M_J)`` already contracted.
    """
    scheme = Scheme.parse(scheme) if isinstance(scheme, str) else scheme
    k = pair_index(nbrs, i, j)
    r = ps.positions[j] - ps.positions[i]
    msum = mob.values[i] + mob.values[j]
    g = corr.scheme_grad[k]
    flux = float(np.sum(r * msum * g) / np.dot(r, r))
    if scheme is Scheme.CB:
        correction = 0.0
        scale, ok = _scale_from_trace(_trace(corr.Gamma), ps.dim)
    else:
        correction = float(np.sum(corr.Nscheme[i] * msum * corr.grad_star[k]))
        if scheme is Scheme.S:
            scale, ok = _scale_from_trace(_trace(corr.Gamma), ps.dim)
        else:
            scale, ok = gamma_bar_scale(corr, ps.dim)
        ok &= ~corr.singular
        if not ok[i]:
            correction = 0.0
    s = scale[i] if ok[i] else _orientation(corr)
    return Transmissibility((i, j), float(s * (flux - correction)), (flux, correction))


# -- cell transmissibility for finite volumes ---------------------------------


@dataclass(frozen=True)
class CellFace:
    """Vector from a cell center to the shared face, plus the face area vector."""

    to_face: np.ndarray
    area: np.ndarray


def tpfa_transmissibility(geom_a: CellFace, geom_b: CellFace, m_a, m_b) -> float:
    """Harmonic two-point transmissibility across a shared face.

    ``m_a``/``m_b`` are diagonal mobilities (scalars or per-axis vectors).
    """
    terms = []
    for geom, m in ((geom_a, m_a), (geom_b, m_b)):
        r = np.asarray(geom.to_face, dtype=float)
        s = np.asarray(geom.area, dtype=float)
        mr = np.asarray(m, dtype=float) * r
        den = abs(float(np.dot(s, mr)))
        if den == 0.0 or not np.any(r):
            raise ValueError("degenerate face geometry in transmissibility")
        terms.append(float(np.dot(r, r)) / den)
    return 1.0 / (terms[0] + terms[1])


# -- boundary rows -------------------------------------------------------------


@dataclass
class BoundarySpec:
    """Dirichlet values and Neumann outward fluxes, keyed by particle index."""

    dirichlet: dict[int, float] = field(default_factory=dict)
    neumann: dict[int, float] = field(default_factory=dict)

    @classmethod
    def from_functions(cls, ps: ParticleSet, value: Callable | None = None,
                       flux: Callable | None = None) -> "BoundarySpec":
        """``value(x)`` on Dirichlet particles, ``flux(x, normal)`` on Neumann ones."""
        spec = cls()
        for i in np.flatnonzero(ps.tags == DIRICHLET):
            spec.dirichlet[int(i)] = float(value(ps.positions[i])) if value else 0.0
        for i in np.flatnonzero(ps.tags == NEUMANN):
            spec.neumann[int(i)] = float(flux(ps.positions[i], ps.normals[i])) if flux else 0.0
        return spec


def _check_tags(ps: ParticleSet, spec: BoundarySpec):
    for i in np.flatnonzero(ps.tags != INTERIOR):
        i = int(i)
        has_d, has_n = i in spec.dirichlet, i in spec.neumann
        if has_d == has_n:
            raise ValueError(f"boundary particle {i} needs exactly one condition")
        if has_d and ps.tags[i] != DIRICHLET or has_n and ps.tags[i] != NEUMANN:
            raise ValueError(f"condition for particle {i} does not match its tag")


def _replace_rows(A: sp.csr_matrix, rows: np.ndarray, new: sp.csr_matrix) -> sp.csr_matrix:
    keep = np.ones(A.shape[0])
    keep[rows] = 0.0
    out = sp.diags(keep) @ A + new
    out = sp.csr_matrix(out)
    out.eliminate_zeros()
    out.sort_indices()
    return out


def apply_dirichlet(system: SparseSystem, ps: ParticleSet, spec: BoundarySpec) -> SparseSystem:
    out = system.copy()
    rows = np.array(sorted(spec.dirichlet), dtype=np.int64)
    if rows.size == 0:
        return out
    eye = sp.csr_matrix((np.ones(rows.size), (rows, rows)), shape=system.A.shape)
    out.A = _replace_rows(system.A, rows, eye)
    out.b[rows] = [spec.dirichlet[int(i)] for i in rows]
    out.row_kind[rows] = ROW_DIRICHLET
    return out


def neumann_rows(ps: ParticleSet, nbrs: NeighborTable, corr: CorrectionState, mob: MobilityField,
                 rows: np.ndarray, geo: PairGeometry | None = None) -> sp.csr_matrix:
    """Rows of ``n . M <grad u>`` with the corrected gradient, for the given particles."""
    geo = geo or pair_geometry(ps, nbrs)
    sel = np.isin(geo.rows, rows)
    pr = geo.rows[sel]
    nm = ps.normals[pr] * mob.values[pr]
    c = geo.vol_j[sel] * np.einsum("pd,pd->p", nm, corr.grad_star[sel])
    diag = -np.bincount(pr, weights=c, minlength=ps.n)[rows]
    r_all = np.concatenate([pr, rows])
    c_all = np.concatenate([geo.cols[sel], rows])
    v_all = np.concatenate([c, diag])
    return sp.csr_matrix((v_all, (r_all, c_all)), shape=(ps.n, ps.n))


def apply_neumann(system: SparseSystem, ps: ParticleSet, nbrs: NeighborTable, corr: CorrectionState,
                  mob: MobilityField, spec: BoundarySpec, geo: PairGeometry | None = None) -> SparseSystem:
    out = system.copy()
    rows = np.array(sorted(spec.neumann), dtype=np.int64)
    if rows.size == 0:
        return out
    new = neumann_rows(ps, nbrs, corr, mob, rows, geo)
    out.A = _replace_rows(system.A, rows, new)
    out.b[rows] = [spec.neumann[int(i)] for i in rows]
    out.row_kind[rows] = ROW_NEUMANN
    return out


def apply_boundary(system: SparseSystem, ps: ParticleSet, nbrs: NeighborTable, corr: CorrectionState,
                   mob: MobilityField, spec: BoundarySpec, geo: PairGeometry | None = None) -> SparseSystem:
    _check_tags(ps, spec)
    out = apply_dirichlet(system, ps, spec)
    return apply_neumann(out, ps, nbrs, corr, mob, spec, geo)


# -- export ------------------------------------------------------------------


def export_system(system: SparseSystem, matrix_path, rhs_path=None) -> None:
    """Coordinate triplets ``I J value`` (0-based) and one RHS value per line."""
    coo = system.A.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(matrix_path, "w") as fh:
        fh.write(f"{system.n} {system.n} {coo.nnz}\n")
        for k in order:
            fh.write(f"{coo.row[k]} {coo.col[k]} {float(coo.data[k])!r}\n")
    if rhs_path is not None:
        with open(rhs_path, "w") as fh:
            fh.writelines(f"{float(v)!r}\n" for v in system.b)
