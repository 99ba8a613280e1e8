"""Command-line driver.

Subcommands: ``check``, ``solve``, ``expand``, ``verify`` and ``sweep``.
Exit status is 0 on success, 1 when a check fails and 2 on input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .analysis import structural_check
from .expansion import build_expansion, classify_regime, dump_terms
from .funcalc import PositivityError, ProblemError, load_problem
from .halfline import HalfLineError
from .refsolve import SolverError, refine_and_estimate
from .study import REF_FRACTION, run_sweep, sweep_pairs

EXIT_OK, EXIT_CHECK, EXIT_INPUT = 0, 1, 2
CASE_CHOICES = {"auto": "auto", "i": "I", "ii": "II", "iii": "III", "iv": "IV"}


class InputError(Exception):
    pass


def _float_list(text):
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _nonneg_int(text):
    n = int(text)
    if n < 0:
        raise argparse.ArgumentTypeError("must be a nonnegative integer")
    return n


def _pos_int(text):
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def build_parser():
    parser = argparse.ArgumentParser(prog="spx", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, orders=True):
        p.add_argument("--problem", required=True, metavar="PATH", help="problem JSON file")
        p.add_argument("--eps", type=_float_list, metavar="LIST", help="override epsilon")
        p.add_argument("--mu", type=_float_list, metavar="LIST", help="override mu")
        p.add_argument("--n-mesh", type=_pos_int, default=512, metavar="N",
                       help="cells per mesh region of the reference solver")
        p.add_argument("--out", metavar="PATH")
        if orders:
            p.add_argument("--case", choices=sorted(CASE_CHOICES), default="auto")
            p.add_argument("--m1", type=_nonneg_int, metavar="N")
            p.add_argument("--m2", type=_nonneg_int, metavar="N")
            p.add_argument("--m", type=_nonneg_int, metavar="N")

    common(sub.add_parser("check", help="parse the problem and test positivity"), orders=False)
    common(sub.add_parser("solve", help="reference solve, CSV output"), orders=False)
    common(sub.add_parser("expand", help="build an expansion and dump its terms"))
    for name, text in (("verify", "single-point remainder report"),
                       ("sweep", "parameter study with decay fit")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--tol", type=float, default=REF_FRACTION, metavar="REAL",
                       help="reference error estimate allowed, as a fraction of the remainder")
        if name == "sweep":
            p.add_argument("--jobs", type=_pos_int, default=1, metavar="N")
    return parser


def _single(values, name, default):
    if values is None:
        return default
    if len(values) != 1:
        raise InputError(f"--{name} takes a single value for this command")
    return values[0]


def _problem(args):
    p = load_problem(args.problem)
    if args.command == "sweep":
        return p
    eps = _single(args.eps, "eps", p.epsilon)
    mu = _single(args.mu, "mu", p.mu)
    return p.with_params(eps, mu)


def _case_and_orders(args, eps, mu):
    case = CASE_CHOICES[args.case]
    if case == "auto":
        case = classify_regime(eps, mu)
    if case == "IV" and args.m is not None:
        raise InputError("--m does not apply to case IV; use --m1/--m2")
    if case in ("II", "III") and (args.m1 is not None or args.m2 is not None):
        raise InputError(f"--m1/--m2 do not apply to case {case}; use --m")
    if case == "I" and any(v is not None for v in (args.m, args.m1, args.m2)):
        raise InputError("case I takes no orders")
    return case, {"m1": args.m1, "m2": args.m2, "m": args.m}


def _write(path, text):
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def cmd_check(args):
    p = load_problem(args.problem)
    print(f"alpha = {p.alpha!r}")
    print(f"regime = {classify_regime(p.epsilon, p.mu)}")
    return EXIT_OK


def cmd_solve(args):
    p = _problem(args)
    ref, est = refine_and_estimate(p, args.n_mesh)
    _write(args.out, ref.to_csv())
    print(f"error estimate = {est!r} on {ref.mesh.n_cells} cells", file=sys.stderr)
    return EXIT_OK


def cmd_expand(args):
    p = _problem(args)
    case, orders = _case_and_orders(args, p.epsilon, p.mu)
    expansion = build_expansion(p, case, n_mesh=args.n_mesh, **orders)
    checks = structural_check(expansion, p)
    doc = dump_terms(expansion, [c.to_dict() for c in checks])
    doc["problem_hash"] = p.digest()
    doc["epsilon"], doc["mu"] = p.epsilon, p.mu
    _write(args.out, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    failed = [c.name for c in checks if not c.passed]
    for name in failed:
        print(f"check failed: {name}", file=sys.stderr)
    return EXIT_CHECK if failed else EXIT_OK


def _report(args, p, pairs, jobs=1):
    case = CASE_CHOICES[args.case]
    for e, u in pairs:
        _case_and_orders(args, e, u)
    report = run_sweep(p, pairs, case=case, m1=args.m1, m2=args.m2, m=args.m,
                       n_mesh=args.n_mesh, tol=args.tol, jobs=jobs)
    if args.out is None:
        sys.stdout.write(report.to_csv())
    else:
        out = Path(args.out)
        _write(out, report.to_csv())
        _write(out.with_suffix(".json"), report.to_json())
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_verify(args):
    p = _problem(args)
    return _report(args, p, [(p.epsilon, p.mu)])


def cmd_sweep(args):
    p = load_problem(args.problem)
    pairs = sweep_pairs(args.eps or [p.epsilon], args.mu or [p.mu])
    return _report(args, p, pairs, jobs=args.jobs)


COMMANDS = {"check": cmd_check, "solve": cmd_solve, "expand": cmd_expand,
            "verify": cmd_verify, "sweep": cmd_sweep}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except PositivityError as exc:
        print(f"positivity check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (OSError, ProblemError, InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (HalfLineError, SolverError, ArithmeticError) as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
