import json

import pytest

from meshfree.cli import EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_OK, ConfigError, main, read_config


def run(tmp_path, *args):
    out = tmp_path / "out"
    code = main([*args, "--out", str(out)])
    summary = json.loads((out / "summary.json").read_text()) if (out / "summary.json").exists() else None
    return code, summary, out


def test_patch_command(tmp_path):
    code, summary, out = run(tmp_path, "patch", "--scheme", "msph")
    assert code == EXIT_OK
    assert summary["results"]["msph"]["max_rel_full_support"] < 1e-9
    assert (out / "patch_msph.csv").read_text().startswith("x,y,exact,approx,abs_err")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["n"] == 21 and len(manifest["config_sha256"]) == 64


def test_manifest_is_deterministic(tmp_path):
    run(tmp_path, "kernel-dump", "--n", "5")
    first = (tmp_path / "out" / "manifest.json").read_text()
    run(tmp_path, "kernel-dump", "--n", "5")
    assert (tmp_path / "out" / "manifest.json").read_text() == first


def test_solve_command(tmp_path):
    code, summary, out = run(tmp_path, "solve", "--n", "12", "--scheme", "ssph,msph", "--export", "yes")
    assert code == EXIT_OK
    assert summary["results"]["msph"]["converged"]
    assert summary["results"]["msph"]["error"] < 0.05
    assert (out / "matrix_msph.txt").exists() and (out / "residuals_ssph.csv").exists()


def test_solve_non_convergence_exit_code(tmp_path):
    code, summary, out = run(tmp_path, "solve", "--n", "20", "--max-iter", "2", "--restart", "2")
    assert code == EXIT_NONCONVERGED
    assert summary["results"]["msph"]["converged"] is False
    assert (out / "residuals_msph.csv").exists()


def test_stability_command(tmp_path):
    code, summary, _ = run(tmp_path, "stability", "--n", "10", "--kgrid", "4")
    assert code == EXIT_OK
    assert set(summary["results"]) == {"cbsph", "ssph", "msph"}
    assert all(v["stable"] for v in summary["results"].values())


def test_monotone_command(tmp_path):
    code, summary, _ = run(tmp_path, "monotone")
    assert code == EXIT_OK
    r = summary["results"]["msph"]
    assert r["sign_pattern_ok"] and r["inverse_positive"] and r["maximum_principle"]


def test_convergence_command(tmp_path):
    code, summary, out = run(tmp_path, "convergence", "--ladder", "25,100", "--scheme", "msph")
    assert code == EXIT_OK
    rows = summary["results"]["msph"]
    assert [r["dof"] for r in rows] == [25, 100]
    assert (out / "convergence_msph.csv").exists()


def test_raster_command(tmp_path):
    code, summary, _ = run(tmp_path, "raster-solve", "--n", "16", "--raster-n", "16", "--corr-len", "3",
                           "--scheme", "msph")
    assert code == EXIT_OK
    assert summary["results"]["msph"]["error_vs_tpfa"] < 0.1


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# patch run\nfunction = quadratic\nscheme = cbsph\nn = 11\n")
    code, summary, out = run(tmp_path, "patch", "--config", str(cfg), "--n", "15")
    assert code == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["n"] == 15 and manifest["config"]["function"] == "quadratic"


@pytest.mark.parametrize("args", [
    ["patch", "--n", "abc"],
    ["patch", "--scheme", "mpfa"],
    ["patch", "--dim", "4"],
    ["solve", "--tol", "-1"],
    ["solve", "--psi", "1,2"],
    ["raster-solve", "--raster", "/nonexistent/k.txt"],
    ["patch", "--config", "/nonexistent.cfg"],
])
def test_config_errors(tmp_path, args):
    assert main([*args, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_unknown_flag_exits_with_config_code(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["patch", "--bogus", "1"])
    assert info.value.code == EXIT_CONFIG


def test_read_config_errors(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("n 5\n")
    with pytest.raises(ConfigError):
        read_config(p)
    p.write_text("colour = red\n")
    with pytest.raises(ConfigError):
        read_config(p)
