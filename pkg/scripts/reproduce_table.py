"""Reproduce one convergence table (or a named study) with a single command.

    python3 scripts/reproduce_table.py 2
    python3 scripts/reproduce_table.py 4 --ladder 25,100,400 --realizations 5
    python3 scripts/reproduce_table.py stability

Tables 1-4 use Dirichlet data, 5-8 the mixed problem. Odd tables use the
small support factor; random tables average over seeded realizations.
Artifacts land in out/table<N>/ (CSV per scheme, summary.json, manifest.json).
"""

import argparse
import sys

from meshfree.cli import main as cli_main

LADDER = "25,100,400,1600,6400,25600"

# table -> (bc, random particles, f)
TABLES = {
    1: ("dirichlet", False, 0.5005),
    2: ("dirichlet", False, 1.001),
    3: ("dirichlet", True, 0.6006),
    4: ("dirichlet", True, 1.2012),
    5: ("mixed", False, 0.5005),
    6: ("mixed", False, 1.001),
    7: ("mixed", True, 0.6006),
    8: ("mixed", True, 1.2012),
}

STUDIES = {
    "stability": ["stability", "--n", "16", "--f", "1.2", "--tau", "0.25", "--scheme", "all"],
    "stability-random": ["stability", "--n", "16", "--f", "1.2", "--tau", "0.25", "--scheme", "all",
                         "--amplitude", "0.1", "--seed", "1"],
    "monotone": ["monotone", "--n", "5", "--f", "1.2", "--mobility", "affine", "--scheme", "all"],
    "patch": ["patch", "--function", "cubic", "--scheme", "all", "--f", "1.2", "--n", "21",
              "--lower", "2", "--upper", "3"],
    "raster": ["raster-solve", "--n", "60", "--seed", "7"],
}


def table_args(number: int, ladder: str, realizations: int, seed: int) -> list[str]:
    bc, random, f = TABLES[number]
    args = ["convergence", "--bc", bc, "--f", str(f), "--scheme", "all", "--ladder", ladder]
    if random:
        args += ["--amplitude", "0.1", "--realizations", str(realizations), "--seed", str(seed)]
    return args


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("target", help="table number 1-8 or one of: " + ", ".join(STUDIES))
    p.add_argument("--ladder", default=LADDER, help="comma-separated DoF values")
    p.add_argument("--realizations", type=int, default=30)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--out", default=None)
    a = p.parse_args(argv)

    if a.target.isdigit() and int(a.target) in TABLES:
        args = table_args(int(a.target), a.ladder, a.realizations, a.seed)
        out = a.out or f"out/table{a.target}"
    elif a.target in STUDIES:
        args = list(STUDIES[a.target])
        out = a.out or f"out/{a.target}"
    else:
        p.error(f"unknown target {a.target!r}")
    return cli_main(args + ["--out", out])


if __name__ == "__main__":
    sys.exit(main())
