"""Cubic-spline kernel, gradient variants and per-particle correction tensors.

Pair gradients are expressed as derivatives with respect to the neighbor
position ``r_J`` (``grad W(r_J - r_I)``). In this orientation the radial
factor ``(r_J - r_I) . grad W / |r_J - r_I|^2`` is non-positive and the
uncorrected moment matrix of an interior particle is close to ``-I``; the
corrected gradient absorbs that sign.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .particles import NeighborTable, ParticleSet

NORMALIZATION = {1: 1.5, 2: 10.0 / (7.0 * np.pi), 3: 1.0 / np.pi}
SINGULAR_CONDITION = 1e12


class GradientVariant(str, Enum):
    PLAIN = "plain"  # grad W
    NORMALIZED_FULL = "full"  # full derivative of W / nu(r_I)
    NORMALIZED_DIFFUSE = "diffuse"  # grad W / nu(r_I), nu held constant
    NORMALIZED_FULL_PAIR = "pair"  # single-pair derivative of nu(r_I, r_J)


@dataclass(frozen=True)
class KernelGradientOption:
    variant: GradientVariant = GradientVariant.PLAIN
    corrected: bool = False

    @classmethod
    def parse(cls, text: str) -> "KernelGradientOption":
        """``plain``, ``diffuse*`` etc.; a trailing ``*`` selects the corrected form."""
        corrected = text.endswith("*")
        return cls(GradientVariant(text.rstrip("*")), corrected)

    def __str__(self):
        return self.variant.value + ("*" if self.corrected else "")


def spline(z):
    """Dimensionless cubic spline shape s(z)."""
    z = np.asarray(z, dtype=float)
    return np.where(
        z <= 1.0,
        1.0 - 1.5 * z**2 + 0.75 * z**3,
        np.where(z <= 2.0, 0.25 * (2.0 - z) ** 3, 0.0),
    )


def dw_dz(z):
    """Derivative of the spline shape; non-positive on z >= 0."""
    z = np.asarray(z, dtype=float)
    return np.where(
        z <= 1.0,
        -3.0 * z + 2.25 * z**2,
        np.where(z <= 2.0, -0.75 * (2.0 - z) ** 2, 0.0),
    )


def w(dist, h, dim: int):
    """Kernel value ``Xi / h^dim * s(dist / h)``."""
    h = np.asarray(h, dtype=float)
    return NORMALIZATION[dim] / h**dim * spline(np.asarray(dist, dtype=float) / h)


@dataclass(frozen=True)
class PairGeometry:
    """Vectorized per-pair quantities in neighbor-table order."""

    rows: np.ndarray
    cols: np.ndarray
    r: np.ndarray  # r_J - r_I, (P, dim)
    dist: np.ndarray
    h: np.ndarray
    w: np.ndarray
    grad: np.ndarray  # grad_{r_J} W, (P, dim)
    vol_j: np.ndarray


def pair_geometry(ps: ParticleSet, nbrs: NeighborTable) -> PairGeometry:
    rows = nbrs.rows
    cols = nbrs.indices
    r = ps.positions[cols] - ps.positions[rows]
    d = np.linalg.norm(r, axis=1)
    if np.any(d <= 0):
        raise ValueError("coincident particles in neighbor table")
    h = nbrs.h_pair
    xi = NORMALIZATION[ps.dim]
    wv = xi / h**ps.dim * spline(d / h)
    dwdr = xi / h ** (ps.dim + 1) * dw_dz(d / h)
    grad = (dwdr / d)[:, None] * r
    return PairGeometry(rows, cols, r, d, h, wv, grad, ps.volumes[cols])


def row_sum(values: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, rows, values)
    return out


def specific_volume(ps: ParticleSet, geo: PairGeometry) -> np.ndarray:
    """Discrete kernel normalization nu(r_I), self contribution included."""
    self_w = NORMALIZATION[ps.dim] / ps.smoothing**ps.dim
    return row_sum(geo.w * geo.vol_j, geo.rows, ps.n) + self_w * ps.volumes


def uncorrected_gradients(ps: ParticleSet, geo: PairGeometry, variant: GradientVariant, nu=None) -> np.ndarray:
    if variant is GradientVariant.PLAIN:
        return geo.grad.copy()
    if nu is None:
        nu = specific_volume(ps, geo)
    nu_i = nu[geo.rows][:, None]
    if variant is GradientVariant.NORMALIZED_DIFFUSE:
        return geo.grad / nu_i
    if variant is GradientVariant.NORMALIZED_FULL:
        # d/dr_I of W/nu, sign-flipped into the r_J orientation
        s = row_sum(geo.grad * geo.vol_j[:, None], geo.rows, ps.n)
        return geo.grad / nu_i - geo.w[:, None] * s[geo.rows] / nu_i**2
    if variant is GradientVariant.NORMALIZED_FULL_PAIR:
        return geo.grad * (1.0 / nu_i - (geo.w * geo.vol_j)[:, None] / nu_i**2)
    raise ValueError(f"unknown gradient variant {variant!r}")


def moment_matrix(geo: PairGeometry, grad: np.ndarray, n: int) -> np.ndarray:
    """``B[I, g, b] = sum_J V_J (r_J - r_I)_g grad_b``."""
    return row_sum(geo.vol_j[:, None, None] * geo.r[:, :, None] * grad[:, None, :], geo.rows, n)


def radial_tensor(geo: PairGeometry, grad: np.ndarray, n: int) -> np.ndarray:
    """``sum_J V_J (r . grad) / |r|^2 * r (x) r``."""
    f = geo.vol_j * np.einsum("pd,pd->p", geo.r, grad) / geo.dist**2
    return row_sum(f[:, None, None] * geo.r[:, :, None] * geo.r[:, None, :], geo.rows, n)


def radial_first_moment(geo: PairGeometry, grad: np.ndarray, n: int) -> np.ndarray:
    """``sum_J V_J r (r . grad) / |r|^2``; equals ``sum_J V_J grad`` for radial gradients."""
    f = geo.vol_j * np.einsum("pd,pd->p", geo.r, grad) / geo.dist**2
    return row_sum(f[:, None] * geo.r, geo.rows, n)


@dataclass(frozen=True)
class CorrectionState:
    option: KernelGradientOption
    nu: np.ndarray  # (N,)
    C: np.ndarray  # (N, n, n) inverse moment matrix
    Gamma: np.ndarray  # (N, n, n) radial tensor of the scheme gradient
    GammaStar: np.ndarray  # (N, n, n)
    Nvec: np.ndarray  # (N, n) sum V grad (uncorrected)
    NvecTilde: np.ndarray  # (N, n) radial first moment of the corrected gradient
    Nscheme: np.ndarray  # (N, n) radial first moment of the scheme gradient
    min_eig_Cinv: np.ndarray  # (N,)
    singular: np.ndarray  # (N,) bool
    grad: np.ndarray  # (P, n) uncorrected pair gradients for the option variant
    grad_star: np.ndarray  # (P, n) corrected pair gradients

    @property
    def scheme_grad(self) -> np.ndarray:
        """Gradient used in the first (Brookshaw) term of every scheme."""
        return self.grad_star if self.option.corrected else self.grad


def build_corrections(ps: ParticleSet, nbrs: NeighborTable, opt: KernelGradientOption | None = None,
                      geo: PairGeometry | None = None) -> CorrectionState:
    opt = opt or KernelGradientOption()
    geo = geo or pair_geometry(ps, nbrs)
    n, dim = ps.n, ps.dim
    nu = specific_volume(ps, geo)
    grad = uncorrected_gradients(ps, geo, opt.variant, nu)
    B = moment_matrix(geo, grad, n)

    singular = np.zeros(n, dtype=bool)
    C = np.zeros_like(B)
    K = np.zeros_like(B)  # applied correction, B^{-T}
    counts = nbrs.counts()
    for i in range(n):
        b = B[i]
        cond = np.linalg.cond(b) if counts[i] >= dim else np.inf
        if not np.isfinite(cond) or cond > SINGULAR_CONDITION:
            singular[i] = True
            C[i] = np.linalg.pinv(b) if counts[i] else 0.0
        else:
            C[i] = np.linalg.inv(b)
        K[i] = C[i].T
    grad_star = np.einsum("pab,pb->pa", K[geo.rows], grad)

    scheme = grad_star if opt.corrected else grad
    Gamma = radial_tensor(geo, scheme, n)
    n_tilde = radial_first_moment(geo, grad_star, n)
    n_scheme = radial_first_moment(geo, scheme, n)
    third = row_sum(
        geo.vol_j[:, None, None, None] * geo.r[:, :, None, None] * geo.r[:, None, :, None] * grad_star[:, None, None, :],
        geo.rows, n,
    )
    gamma_star = Gamma - np.einsum("ig,iabg->iab", n_scheme, third)

    sym = -0.5 * (B + np.transpose(B, (0, 2, 1)))
    lam = np.linalg.eigvalsh(sym)[:, 0]

    return CorrectionState(
        option=opt,
        nu=nu,
        C=C,
        Gamma=Gamma,
        GammaStar=gamma_star,
        Nvec=row_sum(geo.vol_j[:, None] * grad, geo.rows, n),
        NvecTilde=n_tilde,
        Nscheme=n_scheme,
        min_eig_Cinv=lam,
        singular=singular,
        grad=grad,
        grad_star=grad_star,
    )


def pair_index(nbrs: NeighborTable, i: int, j: int) -> int:
    if i == j:
        raise ValueError("gradient of the self pair is not defined")
    lo, hi = nbrs.offsets[i], nbrs.offsets[i + 1]
    k = lo + np.searchsorted(nbrs.indices[lo:hi], j)
    if k >= hi or nbrs.indices[k] != j:
        raise KeyError(f"particle {j} is not a neighbor of {i}")
    return int(k)


def grad_w(ps: ParticleSet, nbrs: NeighborTable, i: int, j: int, opt: KernelGradientOption,
           corr: CorrectionState | None = None) -> np.ndarray:
    """Pair gradient for one (I, J) pair under the selected option."""
    k = pair_index(nbrs, i, j)
    if corr is None or corr.option != opt:
        corr = build_corrections(ps, nbrs, opt)
    return (corr.grad_star if opt.corrected else corr.grad)[k].copy()


def shepard_sum(ps: ParticleSet, nbrs: NeighborTable, i: int, nu: np.ndarray | None = None) -> float:
    """Sum of normalized kernel weights seen by particle ``i`` (self term included)."""
    js = nbrs.neighbors(i)
    lo, hi = nbrs.offsets[i], nbrs.offsets[i + 1]
    wv = w(nbrs.distances[lo:hi], nbrs.h_pair[lo:hi], ps.dim)
    self_w = float(w(0.0, ps.smoothing[i], ps.dim))
    total = float(np.sum(wv * ps.volumes[js])) + self_w * ps.volumes[i]
    if nu is None:
        nu_i = total
    else:
        nu_i = float(nu[i])
    return total / nu_i


def dump_corrections(corr: CorrectionState, path) -> None:
    """CSV with ``particle, nu, lambda_C, gamma_trace, gamma_star_trace, N_x, N_y[, N_z]``."""
    dim = corr.Nvec.shape[1]
    header = ["particle", "nu", "lambda_C", "gamma_trace", "gamma_star_trace"] + [f"N_{a}" for a in "xyz"[:dim]]
    tr_g = np.trace(corr.Gamma, axis1=1, axis2=2)
    tr_s = np.trace(corr.GammaStar, axis1=1, axis2=2)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for i in range(corr.nu.size):
            out.writerow([i, repr(float(corr.nu[i])), repr(float(corr.min_eig_Cinv[i])), repr(float(tr_g[i])),
                          repr(float(tr_s[i]))] + [repr(float(v)) for v in corr.Nvec[i]])
