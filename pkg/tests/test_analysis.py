from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp

from meshfree.analysis import (
    BVPConfig,
    NonConvergence,
    averaged_l2,
    bvp_boundary,
    bvp_particles,
    convergence_study,
    dof_to_n,
    full_support_mask,
    laplacian_patch_error,
    maximum_principle_holds,
    monotonicity_check,
    observed_order,
    relative_error,
    solve_bvp,
    volume_norm,
    von_neumann_growth,
    wavevector_grid,
    write_convergence_csv,
    write_growth_csv,
)
from meshfree.discretization import MobilityField, Scheme, assemble
from meshfree.kernel import KernelGradientOption, build_corrections
from meshfree.linalg import SolverConfig
from meshfree.particles import DIRICHLET, NEUMANN, Domain, build_uniform_grid, find_neighbors, perturb
from meshfree.reference import parse_field, parse_mobility


def lattice_system(n=12, f=1.2, amplitude=0.0, seed=0, scheme=Scheme.M):
    ps = build_uniform_grid(Domain.from_bounds([0.0, 0.0], [n - 1.0, n - 1.0]), n, f)
    ps = perturb(ps, amplitude, seed)
    nb = find_neighbors(ps)
    corr = build_corrections(ps, nb, KernelGradientOption())
    return ps, assemble(scheme, ps, nb, corr, MobilityField.uniform(ps))


def test_norms():
    vol = np.array([1.0, 3.0])
    assert volume_norm([2.0, -1.0], vol) == pytest.approx(np.sqrt(7.0))
    assert volume_norm([2.0, -1.0], vol, p=1) == pytest.approx(5.0)
    assert averaged_l2([2.0, 0.0], vol) == pytest.approx(1.0)
    assert averaged_l2([], []) == 0.0


def test_relative_error_handles_zero_reference():
    vol = np.ones(3)
    assert relative_error(vol, [2.0, 4.0, 0.0], [1.0, 4.0, 0.0]) == pytest.approx(np.sqrt(0.25 / 3))
    assert relative_error(vol, [0.0, 1.0, 1.0], [0.3, 1.0, 1.0]) == pytest.approx(0.3 / np.sqrt(3))


def test_observed_order_and_dof():
    assert observed_order(4e-3, 1e-3, 400, 1600) == pytest.approx(2.0)
    assert dof_to_n(6400) == 80
    with pytest.raises(ValueError):
        dof_to_n(401)


def test_full_support_mask_requires_domain():
    ps = build_uniform_grid(Domain.from_bounds([0.0, 0.0], [1.0, 1.0]), 11, 1.2)
    assert full_support_mask(ps).sum() == 25  # reach 0.24: x and y in {0.3, ..., 0.7}
    with pytest.raises(ValueError):
        full_support_mask(replace(ps, domain=None))


def test_patch_error_quadratic_mobility():
    ps = build_uniform_grid(Domain.from_bounds([2.0, 2.0], [3.0, 3.0]), 21, 1.2)
    nb = find_neighbors(ps)
    corr = build_corrections(ps, nb, KernelGradientOption())
    m = parse_mobility("linear")
    mob = MobilityField.from_function(ps, m.value)
    err = laplacian_patch_error(ps, assemble(Scheme.M, ps, nb, corr, mob), parse_field("quadratic"), m)
    mask = full_support_mask(ps)
    # the pairwise mobility average is exact for a linear mobility and a quadratic field
    assert np.max(err.relative(mask)) < 1e-10
    assert err.norm_all >= err.norm_interior


def test_wavevector_grid():
    k = wavevector_grid(2, 1.0)
    assert k.shape == (256, 2)
    assert k.min() == 0.0 and k.max() == pytest.approx(np.pi)


def test_growth_factor_at_zero_wavevector_is_one():
    ps, system = lattice_system()
    g = von_neumann_growth(ps, system, 0.25, np.zeros((1, 2)))
    assert np.allclose(g.lam, 1.0, atol=1e-12)


def test_growth_factor_against_direct_sum():
    ps, system = lattice_system(amplitude=0.1, seed=2)
    A = system.A.toarray()
    k = np.array([[0.7, 1.9]])
    g = von_neumann_growth(ps, system, 0.25, k, particles=[40])
    x = ps.positions
    direct = 1 + 0.25 * sum(-A[40, j] * np.exp(1j * (x[j] - x[40]) @ k[0]) for j in range(ps.n))
    assert g.lam[0, 0] == pytest.approx(direct, abs=1e-13)


@pytest.mark.parametrize("scheme", [Scheme.CB, Scheme.S, Scheme.M])
def test_uniform_lattice_growth_bounded_and_real(scheme):
    ps, system = lattice_system(scheme=scheme)
    g = von_neumann_growth(ps, system, 0.25, wavevector_grid(2, 1.0))
    mask = full_support_mask(ps)[g.particles]
    assert np.max(np.abs(g.lam[:, mask])) <= 1 + 1e-12
    assert np.max(np.abs(g.lam[:, mask].imag)) < 1e-12


def test_growth_csv(tmp_path):
    ps, system = lattice_system(n=5)
    g = von_neumann_growth(ps, system, 0.25, wavevector_grid(2, 1.0, count=2))
    write_growth_csv(g, tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "k_x,k_y,particle,re,im,abs"
    assert len(lines) == 1 + 4 * 9
    assert sum(1 for _ in g.samples()) == 36


def test_monotonicity_of_m_matrix():
    t = sp.diags([-1, 2, -1], [-1, 0, 1], shape=(6, 6))
    verdict = monotonicity_check(t)
    assert verdict.monotone and verdict.min_inverse_entry > 0


def test_monotonicity_detects_positive_offdiagonal():
    A = np.array([[2.0, 0.5, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]])
    verdict = monotonicity_check(A)
    assert not verdict.sign_pattern_ok
    assert verdict.offending_pairs == [(0, 1, 0.5)]


def test_monotonicity_singular():
    verdict = monotonicity_check(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    assert verdict.singular and not verdict.monotone


def test_maximum_principle():
    assert maximum_principle_holds([0.2, 0.9], [0.0, 1.0])
    assert not maximum_principle_holds([0.2, 1.1], [0.0, 1.0])
    assert maximum_principle_holds([0.2, 1.1], [0.0, 1.0], rows=[0])


def test_bvp_config_validation():
    with pytest.raises(ValueError):
        BVPConfig(bc="periodic")
    with pytest.raises(ValueError):
        BVPConfig(scheme="mpfa")
    assert BVPConfig(n_per_dim=40).dof == 1600


def test_mixed_bvp_tags_and_data():
    cfg = BVPConfig(bc="mixed", n_per_dim=6)
    ps = bvp_particles(cfg)
    assert np.sum(ps.tags == DIRICHLET) == 6
    assert np.sum(ps.tags == NEUMANN) == 14
    spec = bvp_boundary(ps, cfg)
    assert set(spec.dirichlet.values()) == {150.0}
    top_right = ps.n - 1
    # corner flux combines the two edge fluxes along the diagonal normal
    assert spec.neumann[top_right] == pytest.approx((90.0 + 150.0) / np.sqrt(2))


def test_dirichlet_bvp_corner_values():
    cfg = BVPConfig(n_per_dim=5)
    ps = bvp_particles(cfg)
    spec = bvp_boundary(ps, cfg)
    assert spec.dirichlet[0] == 0.5 and spec.dirichlet[4] == 0.5 and spec.dirichlet[24] == 0.0
    assert spec.dirichlet[2] == 1.0


@pytest.mark.parametrize("bc", ["dirichlet", "mixed"])
@pytest.mark.parametrize("n", [12, 40])
def test_direct_and_iterative_solutions_agree(bc, n):
    cfg = BVPConfig(bc=bc, n_per_dim=n)
    it = solve_bvp(cfg)
    direct = solve_bvp(replace(cfg, solver=SolverConfig(method="sparse")))
    scale = np.abs(direct.u).max()
    assert np.max(np.abs(it.u - direct.u)) <= 10 * cfg.solver.tol * scale
    assert it.error == pytest.approx(direct.error, rel=1e-6)
    assert it.error < 0.05


def test_non_convergence_raises():
    cfg = BVPConfig(n_per_dim=20, solver=SolverConfig(max_iter=3, restart=3))
    with pytest.raises(NonConvergence) as info:
        solve_bvp(cfg)
    assert info.value.result is not None and not info.value.result.converged


def test_convergence_study_small(tmp_path):
    rows = convergence_study(BVPConfig(n_per_dim=2), [100, 400])
    assert [r.dof for r in rows] == [100, 400]
    assert rows[0].order is None and rows[1].order > 0
    assert rows[1].error < rows[0].error
    write_convergence_csv(rows, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "dof,error,mean,std,order"
    with pytest.raises(ValueError):
        convergence_study(BVPConfig(), [400, 100])


def test_convergence_study_realizations():
    rows = convergence_study(BVPConfig(f=1.2012, amplitude=0.1), [100], realizations=3, seed=5)
    assert len(rows[0].errors) == 3 and rows[0].std > 0
    assert rows[0].mean == pytest.approx(np.mean(rows[0].errors))
