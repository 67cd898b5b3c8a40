"""``meshfree`` command-line driver.

Every option can come from a flat ``key = value`` config file (``--config``)
or from the matching ``--key`` flag; flags win. Each command writes CSV
artifacts plus ``summary.json`` and ``manifest.json`` into ``--out``.

Exit codes: 0 success, 2 solver non-convergence, 3 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import (
    UNIT_SQUARE,
    BVPConfig,
    NonConvergence,
    convergence_study,
    full_support_mask,
    laplacian_patch_error,
    maximum_principle_holds,
    monotonicity_check,
    relative_error,
    solve_bvp,
    von_neumann_growth,
    wavevector_grid,
    write_convergence_csv,
    write_growth_csv,
    write_patch_csv,
)
from .discretization import BoundarySpec, MobilityField, Scheme, apply_boundary, assemble, export_system
from .kernel import KernelGradientOption, build_corrections, dump_corrections, pair_geometry
from .linalg import SolverConfig, gmres, solve, write_history
from .particles import DIRICHLET, Domain, build_uniform_grid, find_neighbors, perturb, rotate, set_boundary_tags
from .reference import (
    RasterBC,
    lognormal_raster,
    parse_field,
    parse_mobility,
    read_raster,
    tpfa_solve,
    tpfa_system,
)

EXIT_OK = 0
EXIT_NONCONVERGED = 2
EXIT_CONFIG = 3

SCHEMES = ("cbsph", "ssph", "msph")


class ConfigError(ValueError):
    pass


# option name -> (type, default)
OPTIONS = {
    "n": (int, 21),
    "dim": (int, 2),
    "f": (float, 1.2),
    "scheme": (str, "msph"),
    "option": (str, "plain"),
    "function": (str, "cubic"),
    "mobility": (str, "one"),
    "lower": (str, ""),
    "upper": (str, ""),
    "rotation": (float, 0.0),
    "amplitude": (float, 0.0),
    "seed": (int, 0),
    "realizations": (int, 1),
    "bc": (str, "dirichlet"),
    "psi": (str, ""),
    "tau": (float, 0.25),
    "kgrid": (int, 16),
    "ladder": (str, "25,100,400,1600"),
    "method": (str, "gmres"),
    "restart": (int, 30),
    "tol": (float, 1e-10),
    "max_iter": (int, 10000),
    "preconditioner": (str, "ilu0"),
    "dense_threshold": (int, 2000),
    "raster": (str, ""),
    "raster_n": (int, 60),
    "corr_len": (int, 6),
    "sigma": (float, 1.0),
    "export": (str, "no"),
}

COMMANDS = ("patch", "solve", "stability", "monotone", "convergence", "raster-solve", "kernel-dump")


def read_config(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(args: argparse.Namespace) -> dict:
    raw = read_config(args.config) if args.config else {}
    for key in OPTIONS:
        v = getattr(args, key, None)
        if v is not None:
            raw[key] = v
    cfg = {}
    for key, (typ, default) in OPTIONS.items():
        if key in raw:
            try:
                cfg[key] = typ(raw[key])
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {key}: {raw[key]!r}") from None
        else:
            cfg[key] = default
    return cfg


def _floats(text: str, name: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad list for {name}: {text!r}") from None


def _schemes(cfg) -> list[str]:
    if cfg["scheme"] == "all":
        return list(SCHEMES)
    try:
        return [Scheme.parse(s).value for s in cfg["scheme"].split(",")]
    except ValueError:
        raise ConfigError(f"unknown scheme {cfg['scheme']!r}") from None


def _option(cfg) -> KernelGradientOption:
    try:
        return KernelGradientOption.parse(cfg["option"])
    except ValueError:
        raise ConfigError(f"unknown gradient option {cfg['option']!r}") from None


def _solver(cfg) -> SolverConfig:
    try:
        return SolverConfig(cfg["method"], cfg["restart"], cfg["tol"], cfg["max_iter"], cfg["preconditioner"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _domain(cfg, default_lower: float, default_upper: float) -> Domain:
    dim = cfg["dim"]
    if dim not in (1, 2, 3):
        raise ConfigError(f"dim must be 1, 2 or 3, got {dim}")
    lo = _floats(cfg["lower"], "lower") or [default_lower]
    hi = _floats(cfg["upper"], "upper") or [default_upper]
    lo = lo * dim if len(lo) == 1 else lo
    hi = hi * dim if len(hi) == 1 else hi
    if len(lo) != dim or len(hi) != dim:
        raise ConfigError("lower/upper must give one value or one per dimension")
    try:
        return Domain.from_bounds(lo, hi)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _particles(cfg, domain: Domain):
    if cfg["n"] < 2:
        raise ConfigError("n must be >= 2")
    if cfg["f"] <= 0:
        raise ConfigError("f must be positive")
    ps = build_uniform_grid(domain, cfg["n"], cfg["f"])
    if cfg["rotation"]:
        if ps.dim != 2:
            raise ConfigError("rotation needs dim = 2")
        ps = rotate(ps, cfg["rotation"])
    if cfg["amplitude"] > 0:
        ps = perturb(ps, cfg["amplitude"], cfg["seed"])
    return ps


def _mobility_field(cfg, ps) -> MobilityField:
    spec = cfg["mobility"]
    if spec.startswith("affine"):
        # m = 1 + sum x_i, the monotonicity test field
        return MobilityField.scalar(ps, 1.0 + ps.positions.sum(axis=1))
    try:
        m = parse_mobility(spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return MobilityField.scalar(ps, m.value(ps.positions))


# -- output ------------------------------------------------------------------


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _manifest(out: Path, command: str, cfg: dict) -> None:
    blob = json.dumps({"command": command, **cfg}, sort_keys=True).encode()
    _write_json(out / "manifest.json", {
        "command": command,
        "config": cfg,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "versions": {"meshfree": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "seeds": {"seed": cfg["seed"], "realizations": cfg["realizations"]},
        "threads": os.environ.get("MESHFREE_THREADS", ""),
    })


def _f(x) -> float | None:
    x = float(x)
    return x if np.isfinite(x) else None


# -- commands ------------------------------------------------------------------


def cmd_patch(cfg, out: Path) -> tuple[int, dict]:
    ps = _particles(cfg, _domain(cfg, 2.0, 3.0))
    nbrs = find_neighbors(ps)
    geo = pair_geometry(ps, nbrs)
    corr = build_corrections(ps, nbrs, _option(cfg), geo)
    try:
        field = parse_field(cfg["function"])
        mob_t = parse_mobility(cfg["mobility"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    mob = MobilityField.scalar(ps, mob_t.value(ps.positions))
    full = full_support_mask(ps) if cfg["rotation"] == 0 else ps.interior
    summary = {}
    for name in _schemes(cfg):
        system = assemble(name, ps, nbrs, corr, mob, geo)
        err = laplacian_patch_error(ps, system, field, mob_t)
        write_patch_csv(ps, err, out / f"patch_{name}.csv")
        rel = err.relative(full)
        summary[name] = {"l2": err.l2, "norm_all": err.norm_all, "norm_interior": err.norm_interior,
                         "max_rel_full_support": _f(rel.max()) if rel.size else None,
                         "fallback_rows": system.fallback_rows}
        print(f"{name}: L2 {err.l2:.3e}  interior {err.norm_interior:.3e}  "
              f"max rel (full support) {summary[name]['max_rel_full_support']}")
    return EXIT_OK, summary


def _bvp_config(cfg, scheme: str) -> BVPConfig:
    psi = tuple(_floats(cfg["psi"], "psi")) or None
    if psi is not None and len(psi) != 4:
        raise ConfigError("psi needs four values (y=0, x=L, y=H, x=0)")
    try:
        return BVPConfig(cfg["bc"], scheme, cfg["option"], cfg["f"], cfg["n"], cfg["amplitude"], cfg["seed"], 0, psi,
                         _solver(cfg))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_solve(cfg, out: Path) -> tuple[int, dict]:
    summary = {}
    code = EXIT_OK
    for name in _schemes(cfg):
        bvp = _bvp_config(cfg, name)
        try:
            res = solve_bvp(bvp)
        except NonConvergence as exc:
            print(f"{name}: {exc}", file=sys.stderr)
            if exc.result is not None:
                write_history(exc.result.history, out / f"residuals_{name}.csv")
            summary[name] = {"converged": False, "residual": exc.result.residual if exc.result else None}
            code = EXIT_NONCONVERGED
            continue
        write_history(res.solution.history, out / f"residuals_{name}.csv")
        with open(out / f"solution_{name}.csv", "w") as fh:
            fh.write("x,y,u,reference\n")
            for p, u, r in zip(res.ps.positions, res.u, res.reference):
                fh.write(",".join(repr(float(v)) for v in (p[0], p[1], u, r)) + "\n")
        if cfg["export"] == "yes":
            export_system(res.system, out / f"matrix_{name}.txt", out / f"rhs_{name}.txt")
        summary[name] = {"converged": True, "error": res.error, "iterations": res.solution.iterations,
                         "residual": res.solution.residual, "dof": bvp.dof,
                         "fallback_rows": res.system.fallback_rows}
        print(f"{name}: dof {bvp.dof}  relative error {res.error:.4e}  iterations {res.solution.iterations}")
    return code, summary


def cmd_stability(cfg, out: Path) -> tuple[int, dict]:
    # unit spacing so that tau = 0.25 sits at the explicit stability limit
    dom = _domain(cfg, 0.0, float(cfg["n"] - 1))
    ps = _particles(cfg, dom)
    nbrs = find_neighbors(ps)
    geo = pair_geometry(ps, nbrs)
    corr = build_corrections(ps, nbrs, _option(cfg), geo)
    mob = _mobility_field(cfg, ps)
    k = wavevector_grid(ps.dim, ps.spacing, cfg["kgrid"])
    summary = {}
    for name in _schemes(cfg):
        g = von_neumann_growth(ps, assemble(name, ps, nbrs, corr, mob, geo), cfg["tau"], k)
        write_growth_csv(g, out / f"growth_{name}.csv")
        summary[name] = {"max_abs": g.max_abs(), "max_imag": g.max_imag(), "stable": g.max_abs() <= 1 + 1e-12}
        print(f"{name}: max |lambda| {g.max_abs():.15f}  max |Im| {g.max_imag():.3e}")
    return EXIT_OK, summary


def cmd_monotone(cfg, out: Path) -> tuple[int, dict]:
    ps = _particles(cfg, _domain(cfg, 0.0, 1.0))
    nbrs = find_neighbors(ps)
    geo = pair_geometry(ps, nbrs)
    corr = build_corrections(ps, nbrs, _option(cfg), geo)
    mob = _mobility_field(cfg, ps)
    # boundary data in [0, 1]: linear ramp along x
    lo, hi = ps.domain.lower[0], ps.domain.upper[0]
    spec = BoundarySpec.from_functions(ps, value=lambda p: (p[0] - lo) / (hi - lo))
    summary = {}
    for name in _schemes(cfg):
        system = apply_boundary(assemble(name, ps, nbrs, corr, mob, geo), ps, nbrs, corr, mob, spec, geo)
        v = monotonicity_check(system, cfg["dense_threshold"])
        res = solve(system.A, system.b, _solver(cfg))
        dmp = maximum_principle_holds(res.x, list(spec.dirichlet.values()))
        summary[name] = {"sign_pattern_ok": v.sign_pattern_ok, "inverse_positive": v.inverse_positive,
                         "offending_pairs": [list(p) for p in v.offending_pairs[:50]],
                         "min_inverse_entry": v.min_inverse_entry, "maximum_principle": dmp}
        print(f"{name}: sign pattern {v.sign_pattern_ok}  inverse >= 0 {v.inverse_positive}  max principle {dmp}")
    return EXIT_OK, summary


def cmd_convergence(cfg, out: Path) -> tuple[int, dict]:
    ladder = [int(v) for v in _floats(cfg["ladder"], "ladder")]
    if not ladder:
        raise ConfigError("empty dof ladder")
    summary = {}
    code = EXIT_OK
    for name in _schemes(cfg):
        bvp = _bvp_config(cfg, name)
        try:
            rows = convergence_study(bvp, ladder, cfg["realizations"], cfg["seed"])
        except NonConvergence as exc:
            print(f"{name}: {exc}", file=sys.stderr)
            summary[name] = {"converged": False}
            code = EXIT_NONCONVERGED
            continue
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        write_convergence_csv(rows, out / f"convergence_{name}.csv")
        summary[name] = [{"dof": r.dof, "error": r.error, "mean": r.mean, "std": r.std, "order": r.order,
                          "saturated": r.saturated} for r in rows]
    print(f"{'DoF':>7} " + " ".join(f"{n:>22}" for n in summary))
    for i, dof in enumerate(ladder):
        cells = []
        for n, rows in summary.items():
            if isinstance(rows, dict):
                cells.append(f"{'--':>22}")
            elif cfg["realizations"] > 1:
                cells.append(f"{rows[i]['mean']:.3e} +- {rows[i]['std']:.3e}".rjust(22))
            else:
                cells.append(f"{rows[i]['error']:.3e}".rjust(22))
        print(f"{dof:>7} " + " ".join(cells))
    return code, summary


def raster_problem(cfg):
    if cfg["raster"]:
        paths = cfg["raster"].split(",")
        for p in paths:
            if not Path(p).is_file():
                raise ConfigError(f"raster file not found: {p}")
        try:
            raster = read_raster(paths)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    else:
        nr = cfg["raster_n"]
        raster = lognormal_raster((nr, nr), cfg["corr_len"], cfg["seed"], cfg["sigma"])
    if raster.dim != 2:
        raise ConfigError("raster-solve supports 2D rasters")
    # unit pressure drop along y, no flow across x faces
    bc = RasterBC({"y-": ("dirichlet", 2.0), "y+": ("dirichlet", 1.0)})
    return raster, bc


def cmd_raster_solve(cfg, out: Path) -> tuple[int, dict]:
    raster, bc = raster_problem(cfg)
    ext = raster.extent
    dom = Domain.from_bounds(raster.origin, np.asarray(raster.origin) + ext)
    ps = build_uniform_grid(dom, cfg["n"], cfg["f"])
    ps = set_boundary_tags(ps, {"x-": "neumann", "x+": "neumann"})
    nbrs = find_neighbors(ps)
    geo = pair_geometry(ps, nbrs)
    corr = build_corrections(ps, nbrs, _option(cfg), geo)
    mob = raster.sample(ps)
    y0, y1 = dom.lower[1], dom.upper[1]
    spec = BoundarySpec()
    for i in np.flatnonzero(ps.boundary):
        y = ps.positions[i, 1]
        if ps.tags[i] == DIRICHLET:
            spec.dirichlet[int(i)] = 2.0 if abs(y - y0) <= 1e-9 * (y1 - y0) else 1.0
        else:
            spec.neumann[int(i)] = 0.0
    ref = tpfa_solve(raster, bc)
    A_tpfa, b_tpfa = tpfa_system(raster, bc)
    u_ref = ref.interpolate(ps.positions)
    summary = {"tpfa": {}}
    solver = _solver(cfg)
    plain = replace(solver, method="gmres", preconditioner="none")
    ilu = replace(solver, method="gmres", preconditioner="ilu0")
    r0 = gmres(A_tpfa, b_tpfa, plain)
    r1 = gmres(A_tpfa, b_tpfa, ilu)
    write_history(r0.history, out / "residuals_tpfa_none.csv")
    write_history(r1.history, out / "residuals_tpfa_ilu0.csv")
    summary["tpfa"] = {"iterations_none": r0.iterations, "iterations_ilu0": r1.iterations,
                       "converged_none": r0.converged, "converged_ilu0": r1.converged}
    code = EXIT_OK if r1.converged else EXIT_NONCONVERGED
    for name in _schemes(cfg):
        system = apply_boundary(assemble(name, ps, nbrs, corr, mob, geo), ps, nbrs, corr, mob, spec, geo)
        s0 = gmres(system.A, system.b, plain)
        s1 = gmres(system.A, system.b, ilu)
        write_history(s0.history, out / f"residuals_{name}_none.csv")
        write_history(s1.history, out / f"residuals_{name}_ilu0.csv")
        x = s1.x if s1.converged else solve(system.A, system.b, replace(solver, method="sparse")).x
        err = relative_error(ps.volumes, u_ref, x)
        summary[name] = {"error_vs_tpfa": err, "iterations_none": s0.iterations, "iterations_ilu0": s1.iterations,
                         "converged_none": s0.converged, "converged_ilu0": s1.converged}
        if not s1.converged:
            code = EXIT_NONCONVERGED
        print(f"{name}: error vs TPFA {err:.3e}  GMRES iterations none {s0.iterations} / ilu0 {s1.iterations}")
    print(f"tpfa: GMRES iterations none {r0.iterations} / ilu0 {r1.iterations}")
    return code, summary


def cmd_kernel_dump(cfg, out: Path) -> tuple[int, dict]:
    ps = _particles(cfg, _domain(cfg, 0.0, 1.0))
    nbrs = find_neighbors(ps)
    corr = build_corrections(ps, nbrs, _option(cfg))
    dump_corrections(corr, out / "corrections.csv")
    summary = {"particles": ps.n, "singular": int(corr.singular.sum()),
               "lambda_C_min": float(corr.min_eig_Cinv.min()), "lambda_C_max": float(corr.min_eig_Cinv.max())}
    print(f"{ps.n} particles, {summary['singular']} singular, lambda_C in "
          f"[{summary['lambda_C_min']:.4f}, {summary['lambda_C_max']:.4f}]")
    return EXIT_OK, summary


HANDLERS = {
    "patch": cmd_patch,
    "solve": cmd_solve,
    "stability": cmd_stability,
    "monotone": cmd_monotone,
    "convergence": cmd_convergence,
    "raster-solve": cmd_raster_solve,
    "kernel-dump": cmd_kernel_dump,
}

# per-command defaults that differ from the global table
COMMAND_DEFAULTS = {
    "monotone": {"n": 5, "mobility": "affine"},
    "solve": {"n": 40, "f": 1.001},
    "convergence": {"f": 1.001},
    "raster-solve": {"n": 60, "f": 1.2},
    "stability": {"scheme": "all"},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="meshfree", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key = value file")
        p.add_argument("--out", default=f"out/{name}", help="output directory")
        for key, (typ, default) in OPTIONS.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=str, default=None,
                           help=f"default {COMMAND_DEFAULTS.get(name, {}).get(key, default)!r}")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        for key, value in COMMAND_DEFAULTS.get(args.command, {}).items():
            if getattr(args, key) is None and not (args.config and key in read_config(args.config)):
                setattr(args, key, str(value))
        cfg = resolve(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        code, summary = HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"meshfree: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _write_json(out / "summary.json", {"command": args.command, "exit_code": code, "results": summary})
    _manifest(out, args.command, cfg)
    return code


if __name__ == "__main__":
    sys.exit(main())
