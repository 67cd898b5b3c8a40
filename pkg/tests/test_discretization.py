import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from meshfree.analysis import full_support_mask
from meshfree.discretization import (
    ROW_DIRICHLET,
    ROW_NEUMANN,
    BoundarySpec,
    CellFace,
    MobilityField,
    Scheme,
    apply_boundary,
    assemble,
    assemble_brookshaw,
    export_system,
    neumann_rows,
    pair_transmissibility,
    tpfa_transmissibility,
)
from meshfree.kernel import KernelGradientOption, build_corrections
from meshfree.particles import Domain, ParticleSet, build_uniform_grid, find_neighbors, perturb, set_boundary_tags
from meshfree.reference import brute_force_row

UNIT = Domain.from_bounds([0.0, 0.0], [1.0, 1.0])
PATCH = Domain.from_bounds([2.0, 2.0], [3.0, 3.0])
SCHEMES = [Scheme.CB, Scheme.S, Scheme.M]


def setup(ps, option="plain", mob=None):
    nb = find_neighbors(ps)
    corr = build_corrections(ps, nb, KernelGradientOption.parse(option))
    mob = MobilityField.uniform(ps) if mob is None else mob
    return nb, corr, mob


def random_cloud(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(15, 45))
    pos = rng.uniform(0, 1, (n, 2))
    return ParticleSet(pos, np.full(n, 1.0 / n), np.full(n, 0.35), np.zeros(n), np.zeros((n, 2)), 0.2, 1.75)


def test_scheme_parse_aliases():
    assert Scheme.parse("CB") is Scheme.CB
    assert Scheme.parse("schwaiger") is Scheme.S
    assert Scheme.parse("new") is Scheme.M
    with pytest.raises(ValueError):
        Scheme.parse("mpfa")


def test_mobility_validation():
    ps = build_uniform_grid(UNIT, 3, 1.2)
    with pytest.raises(ValueError):
        MobilityField(np.ones(9))
    with pytest.raises(ValueError):
        MobilityField(-np.ones((9, 2)))
    mob = MobilityField.from_function(ps, lambda x: 1 + x.sum(axis=1))
    assert mob.values.shape == (9, 2) and mob.is_scalar
    assert not MobilityField(np.column_stack([np.ones(9), 2 * np.ones(9)])).is_scalar


@pytest.mark.parametrize("scheme", SCHEMES)
@pytest.mark.parametrize("option", ["plain", "diffuse*"])
def test_row_sums_vanish(scheme, option):
    ps = perturb(build_uniform_grid(UNIT, 9, 1.2), 0.1, 1)
    nb, corr, _ = setup(ps, option)
    mob = MobilityField.from_function(ps, lambda x: 1 + x[:, 0] + x[:, 1])
    A = assemble(scheme, ps, nb, corr, mob).A
    assert np.allclose(A @ np.ones(ps.n), 0.0, atol=1e-10 * abs(A).max())


@pytest.mark.parametrize("scheme", [Scheme.S, Scheme.M])
@pytest.mark.parametrize("amplitude", [0.0, 0.1])
def test_linear_fields_annihilated(scheme, amplitude):
    ps = perturb(build_uniform_grid(UNIT, 21, 1.2), amplitude, 4)
    nb, corr, mob = setup(ps)
    system = assemble(scheme, ps, nb, corr, mob)
    ok = np.setdiff1d(np.arange(ps.n), system.fallback_rows)
    for a in ([1, 0], [0, 1], [1, 1]):
        u = ps.positions @ np.array(a, float)
        assert np.max(np.abs((system.A @ u)[ok])) <= 1e-9


@pytest.mark.parametrize("scheme", [Scheme.S, Scheme.M])
def test_cubic_patch_interior_machine_precision(scheme):
    ps = build_uniform_grid(PATCH, 21, 1.2)
    nb, corr, mob = setup(ps)
    A = assemble(scheme, ps, nb, corr, mob).A
    x, y = ps.positions.T
    exact = 6 * x + 6 * y
    approx = -(A @ (x**3 + y**3))
    mask = full_support_mask(ps)
    assert mask.sum() == 225  # three layers lie within 2 h of each face
    assert np.max(np.abs(approx - exact)[mask] / exact[mask]) <= 1e-9


def test_brookshaw_multiplier_quadratic():
    ps = build_uniform_grid(PATCH, 21, 1.2)
    nb, corr, mob = setup(ps)
    A = assemble(Scheme.CB, ps, nb, corr, mob).A
    approx = -(A @ np.sum(ps.positions**2, axis=1))
    assert np.allclose(approx[full_support_mask(ps)], 4.0, atol=1e-7)


def test_brookshaw_without_multiplier_underestimates():
    ps = build_uniform_grid(PATCH, 21, 1.2)
    nb, corr, mob = setup(ps)
    A = assemble_brookshaw(ps, nb, corr, mob, corrected_multiplier=False).A
    approx = -(A @ np.sum(ps.positions**2, axis=1))
    center = 220
    # the plain operator is off by the trace of the radial tensor, -tr(Gamma) / 2
    expected = 4.0 * -np.trace(corr.Gamma[center]) / 2
    assert approx[center] == pytest.approx(expected, rel=1e-12)
    assert approx[center] == pytest.approx(3.9631722454754846, rel=1e-12)


def test_schemes_coincide_on_uniform_interior():
    ps = build_uniform_grid(UNIT, 21, 1.001)
    nb, corr, mob = setup(ps)
    S = assemble(Scheme.S, ps, nb, corr, mob).A.toarray()
    M = assemble(Scheme.M, ps, nb, corr, mob).A.toarray()
    mask = full_support_mask(ps)
    assert np.allclose(S[mask], M[mask], rtol=0, atol=1e-10 * np.abs(S).max())


def test_uniform_lattice_matrix_symmetric_interior():
    ps = build_uniform_grid(UNIT, 15, 1.2)
    nb, corr, mob = setup(ps)
    A = assemble(Scheme.M, ps, nb, corr, mob).A.toarray()
    mask = full_support_mask(ps)
    sub = A[np.ix_(mask, mask)]
    assert np.allclose(sub, sub.T, atol=1e-12 * np.abs(sub).max())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(SCHEMES), st.sampled_from(["plain", "full*", "diffuse", "pair*"]))
def test_assembled_rows_match_brute_force(seed, scheme, option):
    ps = random_cloud(seed)
    nb, corr, _ = setup(ps, option)
    mob = MobilityField.from_function(ps, lambda x: 1 + x[:, 0] ** 2 + x[:, 1])
    u = np.random.default_rng(seed + 1).normal(size=ps.n)
    Au = assemble(scheme, ps, nb, corr, mob).A @ u
    brute = np.array([brute_force_row(ps, nb, corr, mob, scheme, i, u) for i in range(ps.n)])
    scale = np.max(np.abs(brute)) + 1e-300
    assert np.max(np.abs(Au - brute)) <= 1e-12 * scale


@pytest.mark.parametrize("scheme", SCHEMES)
def test_pair_transmissibility_matches_matrix(scheme):
    ps = perturb(build_uniform_grid(UNIT, 8, 1.2), 0.1, 9)
    nb, corr, _ = setup(ps, "plain")
    mob = MobilityField.from_function(ps, lambda x: 1 + x[:, 0])
    A = assemble(scheme, ps, nb, corr, mob).A.toarray()
    for i in (0, 20, 27, 63):
        for j in nb.neighbors(i)[:5]:
            t = pair_transmissibility(ps, nb, corr, mob, int(i), int(j), scheme)
            assert A[i, j] == pytest.approx(-ps.volumes[j] * t.value, rel=1e-12, abs=1e-14)


def test_monotone_sign_pattern_on_uniform_lattice():
    ps = build_uniform_grid(UNIT, 5, 1.2)
    nb, corr, _ = setup(ps)
    mob = MobilityField.from_function(ps, lambda x: 1 + x[:, 0] + x[:, 1])
    A = assemble(Scheme.M, ps, nb, corr, mob).A.toarray()[ps.interior]
    diag = A[:, ps.interior][np.diag_indices(9)]
    off = A.copy()
    off[np.arange(9), np.flatnonzero(ps.interior)] = 0.0
    assert np.all(off <= 1e-15) and np.all(diag > 0)


def test_tpfa_transmissibility():
    a = CellFace(np.array([0.5, 0.0]), np.array([1.0, 0.0]))
    b = CellFace(np.array([-0.5, 0.0]), np.array([1.0, 0.0]))
    assert tpfa_transmissibility(a, b, 1.0, 1.0) == pytest.approx(1.0)
    assert tpfa_transmissibility(a, b, 1.0, 3.0) == pytest.approx(1.5)  # harmonic mean
    with pytest.raises(ValueError):
        tpfa_transmissibility(CellFace(np.zeros(2), np.array([1.0, 0.0])), b, 1.0, 1.0)


def test_tpfa_scheme_not_particle_assembled():
    ps = build_uniform_grid(UNIT, 3, 1.2)
    nb, corr, mob = setup(ps)
    with pytest.raises(ValueError):
        assemble("tpfa", ps, nb, corr, mob)


def mixed_setup():
    ps = set_boundary_tags(build_uniform_grid(UNIT, 9, 1.2), {"x-": "neumann", "x+": "neumann", "y+": "neumann"})
    nb, corr, mob = setup(ps)
    return ps, nb, corr, mob


def test_boundary_rows():
    ps, nb, corr, mob = mixed_setup()
    spec = BoundarySpec.from_functions(ps, value=lambda x: x[0] + 2 * x[1], flux=lambda x, n: n @ [1.0, 2.0])
    system = apply_boundary(assemble(Scheme.M, ps, nb, corr, mob), ps, nb, corr, mob, spec)
    A = system.A.toarray()
    d = np.flatnonzero(system.row_kind == ROW_DIRICHLET)
    assert np.array_equal(A[d], np.eye(ps.n)[d])
    neu = np.flatnonzero(system.row_kind == ROW_NEUMANN)
    assert neu.size == 7 + 7 + 9  # y = 1 corners are Neumann
    u = ps.positions @ [1.0, 2.0]
    # the corrected gradient is exact for linear fields, so flux rows reproduce the data
    assert np.allclose((A @ u)[neu], system.b[neu], atol=1e-12)
    interior = np.flatnonzero(ps.interior)
    assert np.allclose((A @ u)[interior], 0.0, atol=1e-9)


def test_neumann_rows_zero_sum():
    ps, nb, corr, mob = mixed_setup()
    rows = np.flatnonzero(ps.tags == 2)
    R = neumann_rows(ps, nb, corr, mob, rows)
    assert np.allclose(R @ np.ones(ps.n), 0.0, atol=1e-12)


def test_boundary_spec_validation():
    ps, nb, corr, mob = mixed_setup()
    system = assemble(Scheme.M, ps, nb, corr, mob)
    spec = BoundarySpec.from_functions(ps)
    del spec.dirichlet[0]
    with pytest.raises(ValueError):
        apply_boundary(system, ps, nb, corr, mob, spec)
    spec = BoundarySpec.from_functions(ps)
    i = next(iter(spec.neumann))
    spec.dirichlet[i] = 0.0
    del spec.neumann[i]
    with pytest.raises(ValueError):
        apply_boundary(system, ps, nb, corr, mob, spec)


def test_fallback_rows_reported():
    # an isolated pair cannot support a 2D correction
    pos = np.array([[0.0, 0.0], [0.1, 0.0], [3.0, 3.0], [3.1, 3.0], [3.0, 3.1]])
    ps = ParticleSet(pos, 0.01, 0.1, 0, np.zeros((5, 2)), 0.1, 1.0)
    nb, corr, mob = setup(ps)
    system = assemble(Scheme.M, ps, nb, corr, mob)
    assert {0, 1}.issubset(system.fallback_rows)
    assert np.all(np.isfinite(system.A.data))


def test_export_system(tmp_path):
    ps = build_uniform_grid(UNIT, 3, 1.2)
    nb, corr, mob = setup(ps)
    system = assemble(Scheme.M, ps, nb, corr, mob)
    system.b[:] = np.arange(ps.n)
    export_system(system, tmp_path / "A.txt", tmp_path / "b.txt")
    lines = (tmp_path / "A.txt").read_text().splitlines()
    n, m, nnz = map(int, lines[0].split())
    assert (n, m, nnz) == (9, 9, system.A.nnz)
    trip = np.array([line.split() for line in lines[1:]], dtype=float)
    back = sp.csr_matrix((trip[:, 2], (trip[:, 0].astype(int), trip[:, 1].astype(int))), shape=(n, n))
    assert (back != system.A).nnz == 0
    assert np.array_equal(np.loadtxt(tmp_path / "b.txt"), system.b)
