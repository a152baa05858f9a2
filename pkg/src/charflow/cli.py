"""Command line front end.

Exit status: 0 when every check passes, 1 on a check failure, 2 on usage
or configuration errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .characteristics import CharacteristicError, ConvergenceError, FlowOptions, Selection, curves_many
from .fields import FieldError, ScalarField
from .gallery import NAMES, UnknownInstance, gallery
from .lagrangian import (
    ParamError, build_full_param, build_minimal_param, extend_param, mollified_relation_error, mollify_param,
    param_lip_profile,
)
from .pipeline import CHECKS, ConfigError, emit_fan_svg, fan_curves, load_config, run

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _field_source(args):
    """(phi, domain) from ``--instance`` or ``--phi``."""
    if args.phi:
        try:
            phi = ScalarField.from_csv(args.phi)
        except (OSError, FieldError) as exc:
            raise UsageError(str(exc)) from None
        return phi, phi.domain
    g = gallery(args.instance)
    return g.phi, g.domain


def _add_source(p):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--instance", default="ex1", help=f"gallery instance ({', '.join(NAMES)})")
    src.add_argument("--phi", metavar="CSV", help="sampled phi with header z,t,value")
    p.add_argument("--h", type=float, help="output step (default 1e-3; 2^-10 for param extend)")


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# verbs


def cmd_gallery(args):
    if args.action == "list":
        for name in NAMES:
            print(f"{name:14s} {gallery(name).notes}")
        return EXIT_OK
    if not args.name:
        raise UsageError("gallery show needs a name")
    _emit(gallery(args.name).summary())
    return EXIT_OK


_SIDES = {
    "merged": (Selection.MAXIMAL, Selection.MINIMAL, Selection.MERGED),
    "minimal": (Selection.MINIMAL, Selection.MINIMAL, Selection.MINIMAL),
    "maximal": (Selection.MAXIMAL, Selection.MAXIMAL, Selection.MAXIMAL),
    "generic": (Selection.GENERIC, Selection.GENERIC, Selection.GENERIC),
}


def cmd_characteristics(args):
    phi, dom = _field_source(args)
    opts = FlowOptions(h=args.h or 1e-3)
    lo, hi = args.range if args.range else (dom.z_lo, dom.z_hi)
    if args.fan is not None:
        curves = fan_curves(phi, dom, args.fan, opts, args.start[1] if args.start else 0.0)
    else:
        if not args.start:
            raise UsageError("--start z t is required unless --fan is given")
        back, fwd, sel = _SIDES[args.selection]
        curves, _ = curves_many(phi, [args.start[0]], [args.start[1]], (lo, hi), opts, back, fwd, sel)
    if args.out:
        out = Path(args.out)
        if len(curves) == 1:
            curves[0].to_csv(out)
        else:
            out.mkdir(parents=True, exist_ok=True)
            for k, c in enumerate(curves):
                c.to_csv(out / f"curve_{k:03d}.csv")
    if args.svg:
        emit_fan_svg(curves, dom, args.svg)
    for c in curves:
        print(f"{c.selection.value:8s} s0={c.s0:.6g} s=[{c.s[0]:.6g}, {c.s[-1]:.6g}] "
              f"gamma=[{c.gamma[0]:.6g}, {c.gamma[-1]:.6g}] clipped={c.clipped}")
    return EXIT_OK


def cmd_param(args):
    phi, dom = _field_source(args)
    opts = FlowOptions(h=args.h or 1e-3)
    if args.action == "build":
        p = build_full_param(phi, dom, args.resolution, opts)
        info = {"kind": p.kind, "shape": list(p.shape), "tau": [float(p.tau[0]), float(p.tau[-1])],
                "max_gap": p.max_gap, "lattice_step": p.lattice_step,
                "monotonicity_violations": p.monotonicity_violations()}
        ok = p.monotonicity_violations() == 0
    elif args.action == "extend":
        opts = FlowOptions(h=args.h or 2.0 ** -10)
        p = build_minimal_param(phi, dom, args.launches, opts, include_terminal=True)
        p = extend_param(p, args.depth)
        growth = {str(n): g for n, g in sorted(p.trace.growth_by_level().items())}
        ok = all(g <= 2.0 ** (1 - 2 * int(n)) for n, g in growth.items() if int(n) >= 1)
        info = {"kind": p.kind, "shape": list(p.shape), "growth_by_level": growth,
                "lip_profile_half": param_lip_profile(p, 0.5),
                "monotonicity_violations": p.monotonicity_violations()}
        if args.trace:
            Path(args.trace).write_text(p.trace.to_json() + "\n")
    else:
        base = build_full_param(phi, dom, args.resolution, opts)
        p, phi_e, l1 = mollify_param(base, args.eps)
        err = mollified_relation_error(p, phi_e)
        ok = err <= 2.0 * p.h
        info = {"eps": args.eps, "l1_gap": l1, "relation_error": err, "bound": 2.0 * p.h}
        if args.field_out:
            phi_e.to_csv(args.field_out)
    if args.out:
        p.to_csv(args.out)
    _emit(info)
    return EXIT_OK if ok else EXIT_FAIL


def _config(args):
    overrides = list(args.set or [])
    if args.instance:
        overrides.append(f"instance={args.instance}")
    if args.checks is not None:
        overrides.append(f"checks=[{args.checks}]" if args.checks != "all" else "checks=all")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out_dir:
        overrides.append(f"output.dir={args.out_dir}")
    return load_config(args.config, overrides)


def _print_report(report):
    for c in report.checks:
        verdict = "PASS" if c.passed else "FAIL"
        extra = f"  ({c.details['error']})" if "error" in c.details else ""
        print(f"{verdict}  {c.name:28s} measured={c.measured:.6g} {c.relation} {c.bound:.6g}"
              f" tol={c.tolerance:.3g}{extra}")
    print(f"{sum(c.passed for c in report.checks)}/{len(report.checks)} checks passed")


def cmd_verify(args):
    result = run(_config(args), write=False)
    _print_report(result.report)
    return EXIT_OK if result.report.passed else EXIT_FAIL


def cmd_report(args):
    result = run(_config(args), write=True)
    _print_report(result.report)
    for kind, path in sorted(result.artifacts.items()):
        print(f"wrote {kind}: {path}")
    return EXIT_OK if result.report.passed else EXIT_FAIL


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="charflow", description="Characteristic flows, parameterisations and checks")
    sub = ap.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gallery", help="list or show named instances")
    g.add_argument("action", choices=["list", "show"])
    g.add_argument("name", nargs="?")
    g.set_defaults(func=cmd_gallery)

    c = sub.add_parser("characteristics", help="integrate curves and write s,gamma CSV")
    _add_source(c)
    c.add_argument("--start", nargs=2, type=float, metavar=("Z", "T"))
    c.add_argument("--selection", choices=list(_SIDES), default="merged")
    c.add_argument("--range", nargs=2, type=float, metavar=("LO", "HI"))
    c.add_argument("--fan", type=int, metavar="N", help="minimal and maximal curves from N anchors on t = T")
    c.add_argument("--out", help="CSV file (one curve) or directory")
    c.add_argument("--svg", help="fan SVG path")
    c.set_defaults(func=cmd_characteristics)

    p = sub.add_parser("param", help="build, extend or mollify a parameterisation")
    p.add_argument("action", choices=["build", "extend", "mollify"])
    _add_source(p)
    p.add_argument("--resolution", type=int, default=64, help="anchor lattice for build/mollify")
    p.add_argument("--launches", type=int, default=2048, help="minimal curves for extend")
    p.add_argument("--depth", type=int, default=5, help="dyadic depth for extend")
    p.add_argument("--eps", type=float, default=0.05, help="mollifier radius in tau")
    p.add_argument("--out", help="param CSV matrix")
    p.add_argument("--trace", help="extension trace JSON")
    p.add_argument("--field-out", help="mollified field CSV (z,t,value)")
    p.set_defaults(func=cmd_param)

    for verb, fn, text in (("verify", cmd_verify, "run checks and print verdicts"),
                           ("report", cmd_report, "run checks and write report, curves and fan SVG")):
        v = sub.add_parser(verb, help=text)
        v.add_argument("config", nargs="?", help="YAML or JSON run config")
        v.add_argument("--instance", choices=NAMES)
        v.add_argument("--checks", help=f"comma list or 'all' ({', '.join(CHECKS)})")
        v.add_argument("--seed", type=int)
        v.add_argument("--out-dir")
        v.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
        v.set_defaults(func=fn)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, UnknownInstance) as exc:
        print(f"charflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConvergenceError, ParamError) as exc:
        print(f"charflow: check failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (CharacteristicError, FieldError, ValueError) as exc:
        print(f"charflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"charflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
