"""Command-line entry point ``eulign``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

from .errors import (ArgumentError, ConfigError, DomainError, PreconditionError, SingularityError, SolverError,
                     StepSizeError)

warnings.filterwarnings("ignore", message="The TBB threading layer")

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_FAIL = 0, 2, 3, 4

# EULIGN_THREADS must be read before numba spins up its pool
_threads_env = os.environ.get("EULIGN_THREADS")
if _threads_env and "NUMBA_NUM_THREADS" not in os.environ:
    os.environ["NUMBA_NUM_THREADS"] = _threads_env


def _threads():
    return int(_threads_env) if _threads_env else None


def _default_out(cfg: str, suffix: str) -> Path:
    return Path(cfg).with_suffix("").with_name(Path(cfg).stem + suffix)


def _overrides(text: str | None, prefix: str) -> dict:
    """``"a=1; b=[0, 1, 0]"`` -> ``{prefix + ".a": 1, ...}``, values parsed as TOML."""
    from .config import parse

    if not text:
        return {}
    out = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        if "=" not in part:
            raise ConfigError(f"expected key=value in {part!r}")
        key, val = part.split("=", 1)
        out[f"{prefix}.{key.strip()}"] = parse(f"v = {val.strip()}")["v"]
    return out


def _print(obj) -> None:
    print(json.dumps(obj, indent=2))


def cmd_validate(args) -> int:
    from .config import load

    scen = load(args.config)
    if args.print:
        sys.stdout.write(scen.normalized_text())
    else:
        print(f"OK {scen.mode} scenario")
    return EXIT_OK


def cmd_run(args) -> int:
    from . import runs
    from .config import load

    scen = load(args.config)
    out = Path(args.out) if args.out else _default_out(args.config, ".run")
    runs.run(scen, out, _threads())
    print(f"run written to {out}")
    status = EXIT_OK
    for what in args.verify:
        v = runs.verify_energy(out) if what == "energy" else runs.verify_weak(out)
        print(f"{what}: {v['verdict']}")
        if v["verdict"] != "PASS":
            status = EXIT_FAIL
    return status


def cmd_verify_energy(args) -> int:
    from .runs import configure_threads, verify_energy

    configure_threads(_threads())
    v = verify_energy(args.run_dir)
    _print(v)
    return EXIT_OK if v["verdict"] == "PASS" else EXIT_FAIL


def cmd_verify_weak(args) -> int:
    from .runs import configure_threads, verify_weak

    configure_threads(_threads())
    v = verify_weak(args.run_dir)
    _print(v)
    return EXIT_OK if v["verdict"] == "PASS" else EXIT_FAIL


def cmd_compare(args) -> int:
    from .runs import compare, configure_threads

    configure_threads(_threads())
    rep = compare(args.run_a, args.run_b)
    _print(rep)
    return EXIT_FAIL if rep.get("verdict") == "FAIL" else EXIT_OK


def cmd_construct(args) -> int:
    from . import runs
    from .config import load, validate

    scen = load(args.config)
    extra = {**_overrides(args.density, "construct"), **_overrides(args.v0, "construct.v0")}
    cfg = {**scen.config, **extra, "mode": "construct"}
    scen = validate(cfg)
    out = Path(args.out) if args.out else _default_out(args.config, ".construct")
    runs.run(scen, out, _threads())
    _print(json.loads((out / "construct.json").read_text()))
    return EXIT_OK


def cmd_steer(args) -> int:
    from .config import load
    from .runs import configure_threads, steer

    configure_threads(_threads())
    scen = load(args.config)
    out = Path(args.out) if args.out else _default_out(args.config, ".steer")
    rep = steer(scen, out)
    _print({k: rep[k] for k in ("achieved_l1", "seed_l1", "improvement", "evaluations", "invariance")})
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    status = EXIT_OK
    for name, ok, detail in run_all():
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            status = EXIT_FAIL
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eulign", description="Euler-alignment swarm simulations and verification.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check a scenario file")
    s.add_argument("config")
    s.add_argument("--print", action="store_true", help="print the normalized scenario")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("run", help="run a scenario into a run directory")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--verify", action="append", choices=("energy", "weak"), default=[])
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("verify-energy", help="relaxed energy inequality on a hydro run")
    s.add_argument("run_dir")
    s.set_defaults(func=cmd_verify_energy)

    s = sub.add_parser("verify-weak", help="weak-form residuals of a run")
    s.add_argument("run_dir")
    s.set_defaults(func=cmd_verify_weak)

    s = sub.add_parser("compare", help="particle vs hydro moments, or relative energy of two hydro runs")
    s.add_argument("run_a")
    s.add_argument("run_b")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("construct", help="momentum field for a prescribed density path")
    s.add_argument("config")
    s.add_argument("--density", help="overrides of construct.* keys, e.g. 'epsilon=0.2; samples=9'")
    s.add_argument("--v0", help="overrides of construct.v0.* keys, e.g. 'radius=0.25; direction=[1, 0, 0]'")
    s.add_argument("--out")
    s.set_defaults(func=cmd_construct)

    s = sub.add_parser("steer", help="search leader controls toward a target density")
    s.add_argument("config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_steer)

    s = sub.add_parser("selftest", help="kernel and geometry property checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PreconditionError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (StepSizeError, SolverError, SingularityError, DomainError, FloatingPointError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ArgumentError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
