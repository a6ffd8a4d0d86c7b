"""Command-line interface.

Operators are given as a TOML file or as ``corpus:<name>``. Every command
prints a JSON report (or CSV where noted) and exits with status 0 only when
all requested checks pass their tolerances.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import config
from .corpus import by_name
from .errors import EvofamError
from .evolution_family import (
    EvolutionOperator,
    GridField,
    check_adjoint_duality,
    check_cocycle,
    check_commutation_with_A0,
    check_derivative_commutation,
    check_generator_relations,
    decay_exponent_fit,
)
from .multiplier_checks import mihlin_constant_scan
from .mreg_lab import aligned_times, lambda_sweep
from .evolution_family import SpaceTimeField
from .operator_spec import check_legendre_hadamard, check_uniform_ellipticity
from .symbol_propagator import propagate_forced


def load_spec(ref: str):
    if ref.startswith("corpus:"):
        return by_name(ref.split(":", 1)[1]).spec
    return config.load(ref).spec


def _floats(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def cmd_certify(args) -> tuple:
    spec = load_spec(args.spec)
    lh = check_legendre_hadamard(spec, args.samples, args.time_samples, polish=spec.d > 1)
    ue = check_uniform_ellipticity(spec, args.samples, args.time_samples)
    report = {"legendre_hadamard": lh.to_dict(), "uniform_ellipticity": ue.to_dict()}
    return report, lh.passed and ue.passed


def cmd_propagate(args) -> tuple:
    spec = load_spec(args.spec)
    s, t = _floats(args.window)
    xi = np.array(_floats(args.xi))
    grid = np.linspace(s, t, args.steps + 1)
    res = propagate_forced(spec, xi, s, grid)
    return res.to_csv(), True


def _decay_grid(spec, n, alpha):
    lo = max(sum(alpha), 1) / (2 * spec.m) * (n / 4) ** (-2 * spec.m)
    return np.geomspace(lo, 1000 * lo, 25)


def cmd_evolve(args) -> tuple:
    spec = load_spec(args.spec)
    rng = np.random.default_rng(args.seed)
    op = EvolutionOperator(spec, args.n)
    g = GridField.random_bandlimited(spec.d, args.n, op.L, spec.N, rng)
    bps = spec.breakpoints
    s = (bps[0] - 1.0) if bps else 0.0
    t = (bps[-1] + 1.0) if bps else 1.0
    r = 0.5 * (s + t)
    checks = [c.strip() for c in args.checks.split(",") if c.strip()]
    out, ok = {}, True
    for name in checks:
        if name == "cocycle":
            err = check_cocycle(op, s, r, t, g)
            out[name] = {"error": err, "passed": err <= 1e-10}
        elif name == "derivative":
            alpha = (2,) + (0,) * (spec.d - 1)
            err = check_derivative_commutation(op, t, s, alpha, g)
            out[name] = {"error": err, "passed": err <= 1e-10}
        elif name == "duality":
            err = check_adjoint_duality(spec, s, t, op.xi)
            out[name] = {"error": err, "passed": err <= 1e-10}
        elif name == "commutation":
            err = check_commutation_with_A0(op, 0.1, 0.3, t, s, g)
            out[name] = {"error": err, "passed": err <= 1e-12}
        elif name == "decay":
            rows = []
            for order in (1, 2):
                alpha = (order,) + (0,) * (spec.d - 1)
                fit = decay_exponent_fit(op, alpha, t, t + _decay_grid(spec, args.n, alpha))
                target = -order / (2 * spec.m)
                passed = (not fit.inconclusive) and abs(fit.slope - target) <= 0.05
                rows.append({"alpha": list(alpha), "slope": fit.slope, "target": target, "C": fit.C,
                             "cutoff_binding": fit.cutoff_binding, "passed": passed})
            out[name] = {"fits": rows, "passed": all(x["passed"] for x in rows),
                         "note": "operator norms via the frequency-wise supremum of matrix norms"}
        elif name == "generator":
            tt = r if not any(abs(r - b) < 1e-2 for b in bps) else r + 0.25
            rep = check_generator_relations(op, g, s, tt, 1e-2)
            out[name] = {"forward": rep.forward, "backward": rep.backward,
                         "forward_order": rep.forward_order, "backward_order": rep.backward_order,
                         "one_sided": rep.one_sided,
                         "passed": rep.one_sided or (abs(rep.forward_order - 2) <= 0.2 and abs(rep.backward_order - 2) <= 0.2)}
        else:
            raise SystemExit(f"unknown check {name!r}")
        ok &= bool(out[name]["passed"])
    return out, ok


def cmd_mihlin(args) -> tuple:
    spec = load_spec(args.spec)
    beta = _ints(args.beta) if args.beta else (0,) * spec.d
    table = mihlin_constant_scan(spec, args.lam, beta, args.max_order, args.convention, t=args.time)
    return json.loads(table.to_json()), table.finite and table.stable


def cmd_mreg(args) -> tuple:
    spec = load_spec(args.spec)
    rng = np.random.default_rng(args.seed)
    a, b = _floats(args.window)
    times = aligned_times(a, b, args.h, spec.breakpoints)
    f = SpaceTimeField.random_bandlimited(times, spec.d, args.n, 2 * np.pi, spec.N, rng, band=args.band)
    sweep = lambda_sweep(spec, _floats(args.lambda_sweep), f, args.p, args.q, factor=args.factor)
    ok = sweep.bounded and all(r["residual"] <= 1e-6 for r in sweep.rows)
    return {"rows": sweep.rows, "spread": sweep.spread, "factor": sweep.factor, "bounded": sweep.bounded}, ok


def _flatten(prefix, obj, out):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _flatten(f"{prefix}[{i}]", v, out)
    else:
        out.append((prefix, obj))


def cmd_report(args) -> tuple:
    reports = {Path(p).stem: json.loads(Path(p).read_text()) for p in args.inputs}
    if args.format == "json":
        return reports, True
    rows = []
    _flatten("", reports, rows)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["key", "value"])
    writer.writerows(rows)
    return buf.getvalue(), True


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evofam", description=__doc__.splitlines()[0])
    parser.add_argument("--output", "-o", help="write the report here instead of stdout")
    parser.add_argument("--seed", type=int, default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("certify", help="estimate ellipticity constants")
    p.add_argument("spec")
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--time-samples", type=int, default=2)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("propagate", help="symbol solution v(t, xi) as CSV")
    p.add_argument("spec")
    p.add_argument("--xi", required=True, help="comma-separated frequency vector")
    p.add_argument("--window", required=True, help="s,t")
    p.add_argument("--steps", type=int, default=10)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("evolve", help="checks of the evolution family on a periodic grid")
    p.add_argument("spec")
    p.add_argument("--checks", default="cocycle,derivative,duality,commutation,decay,generator")
    p.add_argument("--n", type=int, default=64)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("mihlin", help="Mihlin constants of the resolvent symbol")
    p.add_argument("spec")
    p.add_argument("--convention", choices=["paper", "homogeneous"], default="homogeneous")
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--beta", default="")
    p.add_argument("--max-order", type=int, default=3)
    p.add_argument("--time", type=float, default=0.0)
    p.set_defaults(func=cmd_mihlin)

    p = sub.add_parser("mreg", help="maximal-regularity lambda sweep")
    p.add_argument("spec")
    p.add_argument("--lambda-sweep", default="1,10,100,1000")
    p.add_argument("--window", default="-1,1")
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--band", type=int, default=4)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--q", type=float, default=2.0)
    p.add_argument("--factor", type=float, default=3.0)
    p.set_defaults(func=cmd_mreg)

    p = sub.add_parser("report", help="merge JSON reports")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.set_defaults(func=cmd_report)
    return parser


def _default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result, ok = args.func(args)
    except (EvofamError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    text = result if isinstance(result, str) else json.dumps(result, indent=2, default=_default)
    text = text.replace("NaN", "null").replace("Infinity", "null") if not isinstance(result, str) else text
    if args.output:
        Path(args.output).write_text(text)
    else:
        print(text, end="" if text.endswith("\n") else "\n")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
