"""Static particle clouds on rectangular domains and fixed-radius neighbor search."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

INTERIOR = 0
DIRICHLET = 1
NEUMANN = 2

TAG_NAMES = {INTERIOR: "I", DIRICHLET: "D", NEUMANN: "N"}
_TAG_CODES = {v: k for k, v in TAG_NAMES.items()}


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box ``|x_i - center_i| <= half_lengths_i``."""

    center: np.ndarray
    half_lengths: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        l = np.atleast_1d(np.asarray(self.half_lengths, dtype=float))
        if c.shape != l.shape:
            raise ValueError("center and half_lengths must have the same length")
        if c.size not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {c.size}")
        if np.any(l <= 0):
            raise ValueError("half_lengths must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_lengths", l)

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.half_lengths

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.half_lengths

    @property
    def volume(self) -> float:
        return float(np.prod(2.0 * self.half_lengths))

    @classmethod
    def from_bounds(cls, lower, upper) -> "Domain":
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        return cls(0.5 * (lower + upper), 0.5 * (upper - lower))


@dataclass(frozen=True)
class ParticleSet:
    positions: np.ndarray  # (N, dim)
    volumes: np.ndarray  # (N,)
    smoothing: np.ndarray  # (N,) effective smoothing length per particle
    tags: np.ndarray  # (N,) INTERIOR / DIRICHLET / NEUMANN
    normals: np.ndarray  # (N, dim), zero rows except for Neumann particles
    spacing: float
    factor: float
    domain: Domain | None = field(default=None, compare=False)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        n = pos.shape[0]
        object.__setattr__(self, "positions", pos)
        for name in ("volumes", "smoothing"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,)).copy()
            if np.any(arr <= 0):
                raise ValueError(f"{name} must be positive")
            object.__setattr__(self, name, arr)
        tags = np.broadcast_to(np.asarray(self.tags, dtype=np.int8), (n,)).copy()
        object.__setattr__(self, "tags", tags)
        normals = np.asarray(self.normals, dtype=float).reshape(n, pos.shape[1])
        object.__setattr__(self, "normals", normals)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def interior(self) -> np.ndarray:
        return self.tags == INTERIOR

    @property
    def boundary(self) -> np.ndarray:
        return self.tags != INTERIOR


@dataclass(frozen=True)
class NeighborTable:
    """Symmetric neighbor lists in compressed-row layout.

    Pairs of row ``i`` live in ``offsets[i]:offsets[i+1]``, sorted by neighbor
    index. ``rows`` repeats the owning particle index for vectorized use.
    """

    offsets: np.ndarray
    indices: np.ndarray
    h_pair: np.ndarray
    distances: np.ndarray

    @property
    def n(self) -> int:
        return self.offsets.size - 1

    @property
    def rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), np.diff(self.offsets))

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.offsets[i]:self.offsets[i + 1]]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def pair_set(self) -> set[tuple[int, int]]:
        return set(zip(self.rows.tolist(), self.indices.tolist()))


def symmetrize_h(h_i, h_j):
    """Pair smoothing length: arithmetic mean of the two particle lengths."""
    return 0.5 * (h_i + h_j)


def _lattice_axes(domain: Domain, n_per_dim: int):
    return [np.linspace(lo, hi, n_per_dim) for lo, hi in zip(domain.lower, domain.upper)]


def build_uniform_grid(domain: Domain, n_per_dim: int, f: float) -> ParticleSet:
    """Node-centered lattice with particles on the domain faces.

    The outermost layer is tagged Dirichlet; use :func:`set_boundary_tags`
    to change the conditions per face.
    """
    if domain.dim not in (1, 2, 3):
        raise ValueError(f"dimension must be 1, 2 or 3, got {domain.dim}")
    if n_per_dim < 2:
        raise ValueError("n_per_dim must be at least 2")
    if f <= 0:
        raise ValueError("smoothing factor must be positive")
    axes = _lattice_axes(domain, n_per_dim)
    steps = 2.0 * domain.half_lengths / (n_per_dim - 1)
    mesh = np.meshgrid(*axes, indexing="ij")
    # x varies fastest in the flat ordering
    pos = np.stack([m.transpose().ravel() for m in mesh], axis=1)
    h_p = float(steps.max())
    n = pos.shape[0]
    on_face = _face_mask(pos, domain)
    tags = np.where(on_face.any(axis=1), DIRICHLET, INTERIOR)
    return ParticleSet(
        positions=pos,
        volumes=np.full(n, float(np.prod(steps))),
        smoothing=np.full(n, f * h_p),
        tags=tags,
        normals=np.zeros_like(pos),
        spacing=h_p,
        factor=float(f),
        domain=domain,
    )


def _face_mask(pos: np.ndarray, domain: Domain, tol: float = 1e-9) -> np.ndarray:
    """(N, 2*dim) boolean: column 2k is the lower face of axis k, 2k+1 the upper."""
    scale = tol * np.maximum(domain.half_lengths, 1.0)
    cols = []
    for k in range(domain.dim):
        cols.append(np.abs(pos[:, k] - domain.lower[k]) <= scale[k])
        cols.append(np.abs(pos[:, k] - domain.upper[k]) <= scale[k])
    return np.stack(cols, axis=1)


def set_boundary_tags(ps: ParticleSet, faces: dict[str, str]) -> ParticleSet:
    """Re-tag boundary particles per face.

    ``faces`` maps face names (``x-``, ``x+``, ``y-``, ``y+``, ``z-``, ``z+``)
    to ``"dirichlet"`` or ``"neumann"``; unspecified faces stay Dirichlet.
    A particle on a Dirichlet face is Dirichlet. Particles touching only
    Neumann faces get the normalized sum of those outward normals.
    """
    if ps.domain is None:
        raise ValueError("particle set carries no domain")
    mask = _face_mask(ps.positions, ps.domain)
    names = [f"{ax}{s}" for ax in "xyz"[: ps.dim] for s in "-+"]
    kinds = [faces.get(name, "dirichlet").lower() for name in names]
    for kind in kinds:
        if kind not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown boundary kind {kind!r}")
    tags = np.full(ps.n, INTERIOR, dtype=np.int8)
    normals = np.zeros_like(ps.positions)
    dir_cols = [c for c, k in enumerate(kinds) if k == "dirichlet"]
    neu_cols = [c for c, k in enumerate(kinds) if k == "neumann"]
    on_dir = mask[:, dir_cols].any(axis=1) if dir_cols else np.zeros(ps.n, bool)
    on_neu = mask[:, neu_cols].any(axis=1) if neu_cols else np.zeros(ps.n, bool)
    tags[on_neu] = NEUMANN
    tags[on_dir] = DIRICHLET
    for c in neu_cols:
        axis, sign = divmod(c, 2)
        normals[mask[:, c], axis] += 1.0 if sign else -1.0
    neu = tags == NEUMANN
    normals[neu] /= np.linalg.norm(normals[neu], axis=1, keepdims=True)
    normals[~neu] = 0.0
    return replace(ps, tags=tags, normals=normals)


def realization_rng(seed: int, realization: int = 0) -> np.random.Generator:
    """PCG64 stream for one realization; streams split via ``SeedSequence`` spawn keys."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(realization,))))


def perturb(ps: ParticleSet, amplitude: float, seed: int, realization: int = 0) -> ParticleSet:
    """Shift interior particles uniformly within ``±amplitude * max(h)`` per axis.

    Boundary particles stay on the faces, volumes and smoothing lengths are
    kept at their nominal lattice values.
    """
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    rng = realization_rng(seed, realization)
    shift = amplitude * float(ps.smoothing.max())
    # always draw the full block so the stream does not depend on tagging
    delta = rng.uniform(-shift, shift, size=ps.positions.shape)
    pos = ps.positions.copy()
    inner = ps.interior
    pos[inner] += delta[inner]
    return replace(ps, positions=pos)


def rotate(ps: ParticleSet, angle_deg: float) -> ParticleSet:
    """Rotate a 2D cloud about its domain center (or centroid if no domain)."""
    if ps.dim != 2:
        raise ValueError("rotation is only defined for 2D particle sets")
    center = ps.domain.center if ps.domain is not None else ps.positions.mean(axis=0)
    t = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    pos = (ps.positions - center) @ rot.T + center
    normals = ps.normals @ rot.T
    return replace(ps, positions=pos, normals=normals)


def _table_from_pairs(n: int, rows: np.ndarray, cols: np.ndarray, ps: ParticleSet) -> NeighborTable:
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(offsets, rows + 1, 1)
    offsets = np.cumsum(offsets)
    d = np.linalg.norm(ps.positions[cols] - ps.positions[rows], axis=1)
    h = symmetrize_h(ps.smoothing[rows], ps.smoothing[cols])
    return NeighborTable(offsets, cols.astype(np.int64), h, d)


def find_neighbors_brute(ps: ParticleSet) -> NeighborTable:
    """O(N^2) reference search: pairs with distance below 2 * h_IJ."""
    diff = ps.positions[None, :, :] - ps.positions[:, None, :]
    dist = np.linalg.norm(diff, axis=2)
    h = symmetrize_h(ps.smoothing[:, None], ps.smoothing[None, :])
    hit = dist < 2.0 * h
    np.fill_diagonal(hit, False)
    rows, cols = np.nonzero(hit)
    return _table_from_pairs(ps.n, rows, cols, ps)


def find_neighbors(ps: ParticleSet) -> NeighborTable:
    """Cell-list neighbor search; returns the same pairs as the brute-force scan."""
    n = ps.n
    if n == 0:
        return NeighborTable(np.zeros(1, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0))
    cutoff = 2.0 * float(ps.smoothing.max())
    pos = ps.positions
    origin = pos.min(axis=0)
    cell = np.floor((pos - origin) / cutoff).astype(np.int64)
    ncell = cell.max(axis=0) + 1
    key = np.ravel_multi_index(cell.T, ncell)
    order = np.argsort(key, kind="stable")
    skey = key[order]
    uniq, start = np.unique(skey, return_index=True)
    stop = np.append(start[1:], n)
    lookup = dict(zip(uniq.tolist(), zip(start.tolist(), stop.tolist())))
    shifts = np.array(np.meshgrid(*([[-1, 0, 1]] * ps.dim), indexing="ij")).reshape(ps.dim, -1).T

    rows_out, cols_out = [], []
    for k, (s0, s1) in lookup.items():
        members = order[s0:s1]
        c = np.array(np.unravel_index(k, ncell))
        cand = []
        for sh in shifts:
            nb = c + sh
            if np.any(nb < 0) or np.any(nb >= ncell):
                continue
            span = lookup.get(int(np.ravel_multi_index(nb, ncell)))
            if span is not None:
                cand.append(order[span[0]:span[1]])
        cand = np.concatenate(cand)
        d = np.linalg.norm(pos[cand][None, :, :] - pos[members][:, None, :], axis=2)
        h = symmetrize_h(ps.smoothing[members][:, None], ps.smoothing[cand][None, :])
        hit = (d < 2.0 * h) & (members[:, None] != cand[None, :])
        ii, jj = np.nonzero(hit)
        rows_out.append(members[ii])
        cols_out.append(cand[jj])
    rows = np.concatenate(rows_out)
    cols = np.concatenate(cols_out)
    return _table_from_pairs(n, rows, cols, ps)


def effective_smoothing(ps: ParticleSet, nbrs: NeighborTable) -> np.ndarray:
    """Largest pair smoothing length seen by each particle (its own length included)."""
    out = ps.smoothing.copy()
    np.maximum.at(out, nbrs.rows, nbrs.h_pair)
    return out


# -- plain-text serialization ------------------------------------------------


def save_particles(ps: ParticleSet, path) -> None:
    """Write ``dim N h_p f`` then ``x [y] [z] volume h tag [nx ny nz]`` per particle."""
    lines = [f"{ps.dim} {ps.n} {float(ps.spacing)!r} {float(ps.factor)!r}"]
    for i in range(ps.n):
        parts = [repr(float(v)) for v in ps.positions[i]]
        parts += [repr(float(ps.volumes[i])), repr(float(ps.smoothing[i])), TAG_NAMES[int(ps.tags[i])]]
        if ps.tags[i] == NEUMANN:
            parts += [repr(float(v)) for v in ps.normals[i]]
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def load_particles(path, domain: Domain | None = None) -> ParticleSet:
    text = Path(path).read_text().split("\n")
    head = text[0].split()
    dim, n = int(head[0]), int(head[1])
    h_p, f = float(head[2]), float(head[3])
    pos = np.zeros((n, dim))
    vol = np.zeros(n)
    h = np.zeros(n)
    tags = np.zeros(n, dtype=np.int8)
    normals = np.zeros((n, dim))
    for i, line in enumerate(text[1:n + 1]):
        tok = line.split()
        pos[i] = [float(t) for t in tok[:dim]]
        vol[i] = float(tok[dim])
        h[i] = float(tok[dim + 1])
        tags[i] = _TAG_CODES[tok[dim + 2]]
        if tags[i] == NEUMANN:
            normals[i] = [float(t) for t in tok[dim + 3:dim + 3 + dim]]
    return ParticleSet(pos, vol, h, tags, normals, h_p, f, domain)
