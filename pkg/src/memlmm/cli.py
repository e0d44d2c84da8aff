"""Command-line entry point: ``memlmm <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 solver or I/O failure,
4 failed ``--assert`` check.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from fractions import Fraction
from typing import List, Optional

import numpy as np

from . import analysis
from .lmm import METHOD_TOKENS, get_method
from .oracle import exact_solution_for, reference_solution
from .problem import (
    BUILTIN_IDS,
    LinearTestProblem,
    builtin_example,
    problem_from_json,
    problem_to_json,
)
from .quadrature import RULE_TOKENS, get_rule
from .solver import NewtonFailure, SolverConfig, solve

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_ASSERT = 0, 2, 3, 4

SCHEMES = {"open-be": "open_backward_euler", "open-trap": "open_trapezoidal"}


class ConfigError(Exception):
    pass


class SolverError(Exception):
    pass


# --- parsing helpers -------------------------------------------------------


def parse_step(text: str) -> float:
    """``0.25``, ``1/4`` or ``2^-2``."""
    t = text.strip()
    try:
        if t.startswith("2^"):
            return 2.0 ** int(t[2:])
        return float(Fraction(t))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"cannot parse step size {text!r}") from None


def parse_h_list(text: str) -> List[float]:
    """``2^-a..2^-b`` (dyadic sweep) or a comma-separated list."""
    t = text.strip()
    if ".." in t:
        lo, hi = t.split("..", 1)
        if not (lo.startswith("2^") and hi.startswith("2^")):
            raise ConfigError(f"range form must be 2^-a..2^-b, got {text!r}")
        try:
            a, b = int(lo[2:]), int(hi[2:])
        except ValueError:
            raise ConfigError(f"bad exponents in {text!r}") from None
        if b >= a:
            raise ConfigError("h-list range must decrease, e.g. 2^-3..2^-10")
        return [2.0 ** e for e in range(a, b - 1, -1)]
    return [parse_step(x) for x in t.split(",") if x.strip()]


def parse_range(text: str):
    """``lo:hi:n`` to a linspace."""
    try:
        lo, hi, n = text.split(":")
        return np.linspace(float(lo), float(hi), int(n))
    except ValueError:
        raise ConfigError(f"range must look like lo:hi:n, got {text!r}") from None


def load_problem(args):
    token = args.problem
    if token is None:
        raise ConfigError("--problem is required")
    if token.lower() in BUILTIN_IDS:
        try:
            return builtin_example(token, lam=args.lam, includes_state=args.includes_state)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if os.path.isfile(token):
        try:
            with open(token) as fh:
                obj = json.load(fh)
            return problem_from_json(obj)
        except (OSError, json.JSONDecodeError, ValueError) as exc:
            raise ConfigError(f"cannot load problem {token!r}: {exc}") from None
    raise ConfigError(f"unknown problem {token!r}; expected {'|'.join(BUILTIN_IDS)} or a JSON file")


def _method(args):
    try:
        return get_method(args.method)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _rule(args):
    try:
        return get_rule(args.quad)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _cfg_kw(args, m):
    if args.startup == "refined" and m.order >= 3:
        print(f"warning: refined startup limits {m.name} (order {m.order}) to about second order",
              file=sys.stderr)
    return dict(startup=args.startup, kernel_cache=args.kernel_cache,
                memory_weighting=args.memory_weighting)


# --- output ----------------------------------------------------------------


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def _json_value(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else str(f)
    return v


def write_atomic(path: str, text: str):
    if path == "-":
        sys.stdout.write(text)
        return
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".memlmm-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit(args, header: List[str], rows, meta: Optional[dict] = None):
    if args.format == "json":
        obj = dict(meta or {})
        obj["columns"] = header
        obj["rows"] = [[_json_value(v) for v in r] for r in rows]
        text = json.dumps(obj, indent=1) + "\n"
    else:
        lines = [",".join(header)]
        lines += [",".join(fmt(v) for v in r) for r in rows]
        text = "\n".join(lines) + "\n"
    try:
        write_atomic(args.output, text)
    except OSError as exc:
        raise SolverError(f"cannot write {args.output!r}: {exc}") from None


# --- commands --------------------------------------------------------------


def cmd_solve(args) -> int:
    p = load_problem(args)
    if args.dump_problem:
        try:
            text = json.dumps(problem_to_json(p), indent=1) + "\n"
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        try:
            write_atomic(args.dump_problem, text)
        except OSError as exc:
            raise SolverError(f"cannot write {args.dump_problem!r}: {exc}") from None
    m, rule = _method(args), _rule(args)
    h = parse_step(args.h)
    res = solve(p, m, rule, SolverConfig(h=h, t_end=args.t_end, **_cfg_kw(args, m)))
    header = ["t"] + [f"x_{i}" for i in range(p.dimension)]
    rows = [[t, *x] for t, x in zip(res.times, res.states)]
    emit(args, header, rows, {"status": res.status})
    if not res.completed:
        raise SolverError(f"{res.status} at step {res.failed_step}; output truncated there")
    return EXIT_OK


def cmd_converge(args) -> int:
    p = load_problem(args)
    m, rule = _method(args), _rule(args)
    hs = parse_h_list(args.h_list)
    exact = exact_solution_for(p)
    if exact is None:
        print("note: no closed form for this problem; using a fine-grid reference", file=sys.stderr)
        exact = reference_solution(p, args.t_end)
    kw = _cfg_kw(args, m)
    kw.pop("startup")
    table = analysis.convergence_study(p, m, rule, hs, args.t_end, exact=exact, **kw)
    rows = [[r.h, r.sup_error, r.observed_order] for r in table.rows]
    expected = args.expect_order if args.expect_order is not None else min(m.order, rule.order)
    meta = {"expected_order": expected}
    try:
        meta["tail_order"] = table.tail_order()
    except ValueError:
        meta["tail_order"] = None
    emit(args, ["h", "sup_error", "observed_order"], rows, meta)
    if any(not math.isfinite(r.sup_error) for r in table.rows):
        raise SolverError("; ".join(f"h={r.h:g}: {r.note}" for r in table.rows if r.note))
    if args.check:
        if meta["tail_order"] is None or abs(meta["tail_order"] - expected) > 0.4:
            print(f"assert failed: tail order {meta['tail_order']} vs expected {expected} +/- 0.4",
                  file=sys.stderr)
            return EXIT_ASSERT
    return EXIT_OK


def cmd_stability(args) -> int:
    p = load_problem(args)
    m, rule = _method(args), _rule(args)
    hs = parse_h_list(args.h_list)
    probe = analysis.zero_stability_probe(p, m, rule, hs, args.t_end, delta=args.delta,
                                          **_cfg_kw(args, m))
    rows = [[r.h, r.amplification] for r in probe.rows]
    emit(args, ["h", "amplification"], rows, {"passes": probe.passes, "growth": probe.growth})
    if args.check and not probe.passes:
        print(f"assert failed: amplification growth {probe.growth:.3g}", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


def cmd_weak_astab(args) -> int:
    p = load_problem(args)
    params = p.linear_test_parameters()
    if params is None:
        raise ConfigError("weak-astab needs a scalar linear test problem")
    h = parse_step(args.h)
    if args.scheme in SCHEMES:
        tp = LinearTestProblem(params[0], params[1], float(p.x0[0]))
        v = analysis.weak_astability_run(tp, SCHEMES[args.scheme], h, args.t_end,
                                         weighting=args.weighting, decay_eps=args.decay_eps)
        label = args.scheme
    elif args.scheme == "lmm":
        m, rule = _method(args), _rule(args)
        res = solve(p, m, rule, SolverConfig(h=h, t_end=args.t_end, **_cfg_kw(args, m)))
        v = analysis.classify_trajectory(res.states, abs(float(p.x0[0])),
                                         res.status == "overflow", args.decay_eps)
        label = f"{m.name}+{rule.token}"
    else:
        raise ConfigError(f"unknown scheme {args.scheme!r}")
    emit(args, ["scheme", "h", "classification", "final_ratio", "peak_ratio"],
         [[label, h, v.classification, v.final_ratio, v.peak_ratio]])
    if args.check and args.expect and v.classification != args.expect:
        print(f"assert failed: {v.classification} (expected {args.expect})", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


def cmd_region(args) -> int:
    lams, cs = parse_range(args.lambda_range), parse_range(args.c_range)
    h = parse_step(args.h)
    if args.scheme in SCHEMES:
        scheme, rule = SCHEMES[args.scheme], None
    elif args.scheme == "lmm":
        scheme, rule = _method(args), _rule(args)
    else:
        raise ConfigError(f"unknown scheme {args.scheme!r}")
    scan = analysis.region_scan(scheme, lams, cs, a=args.a, h=h, T=args.t_end,
                                decay_eps=args.decay_eps, rule=rule, weighting=args.weighting)
    rows = []
    for i, lam in enumerate(scan.lambdas):
        for j, c in enumerate(scan.cs):
            rows.append([lam, c, scan.numeric[i, j], scan.exact[i, j], scan.sufficient[i, j]])
    emit(args, ["lambda", "c", "numeric", "exact", "sufficient"], rows,
         {"violations": scan.violations, "slack": scan.slack})
    print(f"violations={scan.violations} slack={scan.slack}", file=sys.stderr)
    if args.check and (scan.violations or not scan.slack):
        print("assert failed: sufficient-set violations or no slack point", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


def cmd_lemma(args) -> int:
    h = parse_step(args.h)
    if args.which == "zero-stability":
        lam = complex(args.lam_complex) if args.lam_complex else complex(args.lam or 1.0)
        ok = analysis.lemma31_check(lam, args.mu, h, args.n)
        emit(args, ["lemma", "lambda", "mu", "h", "N", "holds"],
             [["zero-stability", str(lam), args.mu, h, args.n, ok]])
    else:
        r, scale = args.k_ratio, args.k_scale
        if not 0 <= r < 1:
            raise ConfigError("--k-ratio must lie in [0, 1)")
        kappa = scale * r / (1 - r)
        res = analysis.lemma52_check(args.beta, args.lam, lambda j: scale * r ** j, h, args.n,
                                     kappa=kappa, weighting=args.weighting)
        ok = res.decayed
        emit(args, ["lemma", "beta", "lambda", "kappa", "h", "N", "decayed", "monotone_tail",
                    "nonnegative", "final"],
             [["weak-a", args.beta, args.lam, kappa, h, args.n, res.decayed,
               res.monotone_tail, res.nonnegative, res.final]])
    if args.check and not ok:
        return EXIT_ASSERT
    return EXIT_OK


def cmd_trace(args) -> int:
    p = load_problem(args)
    m, rule = _method(args), _rule(args)
    h = parse_step(args.h)
    kw = _cfg_kw(args, m)
    kw["kernel_cache"] = True
    tr = analysis.long_horizon_trace(p, m, rule, h, args.t_end, max_points=args.max_points, **kw)
    emit(args, ["t", "norm_x"], [[t, v] for t, v in zip(tr.times, tr.norms)],
         {"final": tr.final, "tail_monotone": tr.tail_monotone,
          "tail_rel_change": tr.tail_rel_change, "status": tr.status})
    print(f"final={tr.final:.6g} tail_monotone={tr.tail_monotone} "
          f"tail_rel_change={tr.tail_rel_change:.3g}", file=sys.stderr)
    if tr.status != "completed":
        raise SolverError(f"trace stopped: {tr.status}")
    return EXIT_OK


# --- argument parser -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="memlmm", description="Multistep solvers for ODEs with memory.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp, need_method=True, need_problem=True):
        if need_problem:
            sp.add_argument("--problem", help=f"{'|'.join(BUILTIN_IDS)} or a JSON problem file")
            sp.add_argument("--lambda", dest="lam", type=float, help="lambda for ex6")
            sp.add_argument("--includes-state", action="store_true", default=None,
                            help="ex2 only: put x(s) inside the memory integrand")
        if need_method:
            sp.add_argument("--method", default="bdf2", help="|".join(METHOD_TOKENS))
            sp.add_argument("--quad", default="midpoint", help="|".join(RULE_TOKENS))
            sp.add_argument("--startup", choices=("exact", "refined"), default="exact")
            sp.add_argument("--kernel-cache", action="store_true")
            sp.add_argument("--memory-weighting", choices=("beta", "literal"), default="beta")
        sp.add_argument("--t-end", type=float, default=10.0)
        sp.add_argument("-o", "--output", default="-", help="output path ('-' for stdout)")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--assert", dest="check", action="store_true",
                        help="exit 4 when the command's acceptance check fails")

    sp = sub.add_parser("solve", help="solve one problem and print the trajectory")
    common(sp)
    sp.add_argument("--h", default="2^-6")
    sp.add_argument("--dump-problem", metavar="PATH", help="also write the problem as JSON")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("converge", help="sup-error and observed order over an h sweep")
    common(sp)
    sp.add_argument("--h-list", default="2^-3..2^-8")
    sp.add_argument("--expect-order", type=float)
    sp.set_defaults(func=cmd_converge)

    sp = sub.add_parser("stability", help="zero-stability perturbation probe")
    common(sp)
    sp.add_argument("--h-list", default="2^-4..2^-8")
    sp.add_argument("--delta", type=float, default=1e-6)
    sp.set_defaults(func=cmd_stability)

    sp = sub.add_parser("weak-astab", help="decay verdict on a linear test problem")
    common(sp)
    sp.add_argument("--scheme", default="open-be", help="open-be|open-trap|lmm")
    sp.add_argument("--h", default="1/4")
    sp.add_argument("--weighting", choices=("consistent", "literal"), default="consistent")
    sp.add_argument("--decay-eps", type=float, default=1e-6)
    sp.add_argument("--expect", choices=("decayed", "bounded", "diverged"))
    sp.set_defaults(func=cmd_weak_astab)

    sp = sub.add_parser("region", help="stability scan over a (lambda, c) grid")
    common(sp, need_problem=False)
    sp.set_defaults(t_end=None)
    sp.add_argument("--scheme", default="open-be", help="open-be|open-trap|lmm")
    sp.add_argument("--lambda-range", default="-6:2:40")
    sp.add_argument("--c-range", default="-6:6:40")
    sp.add_argument("--a", type=float, default=1.0)
    sp.add_argument("--h", default="0.1")
    sp.add_argument("--weighting", choices=("consistent", "literal"), default="consistent")
    sp.add_argument("--decay-eps", type=float, default=1e-6)
    sp.set_defaults(func=cmd_region)

    sp = sub.add_parser("lemma", help="iterate one of the induction-lemma recurrences")
    common(sp, need_method=False, need_problem=False)
    sp.add_argument("which", choices=("zero-stability", "weak-a"))
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--lambda-complex", dest="lam_complex", help="e.g. 0.3+0.4j")
    sp.add_argument("--mu", type=float, default=1.0)
    sp.add_argument("--beta", type=float, default=1.0)
    sp.add_argument("--k-ratio", type=float, default=0.5, help="k_j = scale * ratio^j")
    sp.add_argument("--k-scale", type=float, default=1.0)
    sp.add_argument("--weighting", choices=("consistent", "literal"), default="consistent")
    sp.add_argument("--h", default="0.1")
    sp.add_argument("--n", type=int, default=100)
    sp.set_defaults(func=cmd_lemma)

    sp = sub.add_parser("trace", help="long-horizon trajectory norm, subsampled")
    common(sp)
    sp.set_defaults(method="bdf1", startup="refined")
    sp.add_argument("--h", default="2^-8")
    sp.add_argument("--max-points", type=int, default=10000)
    sp.set_defaults(func=cmd_trace)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if args.command == "lemma" and args.which == "weak-a" and args.lam is None:
            raise ConfigError("lemma weak-a needs --lambda")
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (NewtonFailure, RuntimeError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
