"""Command-line front end: ``monocone <subcommand> [options]``.

Every subcommand writes CSV (``#`` metadata lines, then a header row) or a
single JSON object, to ``--out`` or stdout.  Outputs embed the full
configuration and seed and contain no timestamps, so identical arguments give
identical bytes.
"""

from __future__ import annotations

import argparse
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cones import ConeSpec, default_threads, mc_statdim, project
from .denoise import QpFailure, levy_bound, minimax_risk, optimal_lambda, prox_denoise, walk_max_expectation
from .recovery import crossing, phase_sweep, transition_width
from .signals import ChangePointSet, Variant, place_change_points, vector_from_csv, vector_to_csv
from .statdim import curve_difference_max, curves, nonneg_l1_ptc, sd, sd_uniform_average

PLACEMENTS = ("uniform", "equispaced", "consecutive", "explicit")


def _indices(text):
    if text is None or text == "":
        return ()
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _cps(args) -> ChangePointSet:
    if args.indices is None:
        raise ValueError("--indices: required to describe the change points")
    return ChangePointSet(args.n, args.indices, args.variant)


def _config(args) -> dict:
    skip = {"func", "out", "command"}
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


def _meta_lines(args, extra=None) -> str:
    lines = [f"# monocone {__version__}", f"# command: {args.command}"]
    for key, value in _config(args).items():
        lines.append(f"# {key}: {json.dumps(value)}")
    for key, value in (extra or {}).items():
        lines.append(f"# {key}: {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def _table(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    return buf.getvalue()


def _emit(args, text: str):
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _emit_json(args, payload: dict):
    payload = {"version": __version__, "config": _config(args), **payload}
    _emit(args, json.dumps(payload, indent=2, sort_keys=False) + "\n")


def _read_vector(path) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValueError(f"--input: cannot read {path}: {exc.strerror}") from None
    try:
        return vector_from_csv(text)
    except ValueError as exc:
        raise ValueError(f"--input: {exc}") from None


# --- subcommands ------------------------------------------------------------------------

def cmd_statdim(args):
    placements = args.placement.split(",")
    for p in placements:
        if p not in PLACEMENTS:
            raise ValueError(f"--placement: unknown placement {p!r}")
    rows = []
    if "explicit" in placements:
        cps = _cps(args)
        rows.append((cps.n, cps.k, "explicit", float(sd(cps))))
        placements = [p for p in placements if p != "explicit"]
    if placements and args.k is None:
        raise ValueError("--k: required for named placements")
    k_values = range(args.k, (args.k_max or args.k) + 1) if placements else []
    for k in k_values:
        for p in placements:
            if p == "uniform":
                value = sd_uniform_average(args.n, k, args.samples, [args.seed, k], args.variant)[0]
            else:
                value = float(sd(place_change_points(args.n, k, p, args.variant)))
            rows.append((args.n, k, p, value))
    _emit(args, _meta_lines(args) + _table(["n", "k", "placement", "sd"], rows))


def cmd_curves(args):
    c = curves(args.grid)
    eps_star, diff_star = curve_difference_max(max(args.grid, 1000))
    rows = zip(*(c[key].tolist() for key in ("eps", "delta_u", "l1_plus", "diff")))
    meta = {"eps_star": eps_star, "diff_star": diff_star}
    _emit(args, _meta_lines(args, meta) + _table(["eps", "delta_u", "l1_plus", "diff"], rows))


def _cone(args) -> ConeSpec:
    if args.cone == "descent":
        return ConeSpec.descent(_cps(args))
    return ConeSpec(args.cone, args.n)


def cmd_project(args):
    g = _read_vector(args.input)
    if args.n is None:
        args.n = g.size
    if g.size != args.n:
        raise ValueError(f"--input: vector has length {g.size}, expected n={args.n}")
    _emit(args, _meta_lines(args) + vector_to_csv(project(g, _cone(args)), header="value"))


def cmd_mc_sd(args):
    cone = _cone(args)
    est = mc_statdim(cone, args.samples, args.seed, args.threads)
    payload = est.to_dict()
    if cone.kind == "descent":
        payload["closed_form"] = float(sd(cone.cps))
    _emit_json(args, payload)


def cmd_phase_sweep(args):
    placement = args.placement
    if placement == "explicit":
        placement = list(_cps(args).indices)
    elif args.k is None:
        raise ValueError("--k: required for named placements")
    if args.m_min > args.m_max:
        raise ValueError(f"--m-min: {args.m_min} exceeds --m-max {args.m_max}")
    grid = phase_sweep(args.n, args.k, range(args.m_min, args.m_max + 1), args.trials, args.seed,
                       placement, args.variant, args.threads)
    meta = {"m50": grid.m50(), "sd_mean": grid.sd_mean, "width_10_90": transition_width(grid)}
    _emit(args, _meta_lines(args, meta) + grid.to_csv(emit_ptc=args.emit_ptc))


def cmd_compare_l1(args):
    ms = range(args.m_min, args.m_max + 1)
    mono = phase_sweep(args.n, args.k, ms, args.trials, args.seed, "uniform", Variant.PLAIN, args.threads)
    l1 = phase_sweep(args.n, args.k, ms, args.trials, args.seed, "uniform", Variant.PLAIN, args.threads,
                     solver="l1")
    eps = args.k / args.n
    meta = {
        "m50_monotone": mono.m50(),
        "m50_l1": l1.m50(),
        "sd_monotone_mean": mono.sd_mean,
        "sd_l1_asymptotic": args.n * nonneg_l1_ptc(eps),
    }
    rows = [(m, a.prob, b.prob, a.nonconverged, b.nonconverged) for m, a, b in zip(ms, mono.rows, l1.rows)]
    header = ["m", "prob_monotone", "prob_l1", "nonconverged_monotone", "nonconverged_l1"]
    _emit(args, _meta_lines(args, meta) + _table(header, rows))


def cmd_denoise(args):
    y = _read_vector(args.input)
    if args.auto_lambda:
        if args.sigma is None:
            raise ValueError("--sigma: required with --auto-lambda")
        cps = ChangePointSet(y.size, args.indices or (), Variant.NONNEG)
        if cps.k == 0:
            raise ValueError("--indices: --auto-lambda needs at least the last change point")
        lam = optimal_lambda(cps, args.sigma, args.samples, args.seed)["lambda"]
    elif args.lam is None:
        raise ValueError("--lambda: give a weight or use --auto-lambda")
    else:
        lam = args.lam
    x = prox_denoise(y, lam, args.variant)
    _emit(args, _meta_lines(args, {"lambda": lam}) + vector_to_csv(x, header="value"))


def cmd_risk(args):
    cps = ChangePointSet(args.n, args.indices or (), Variant.NONNEG)
    risk = minimax_risk(cps, samples=args.samples, seed=args.seed, walk_samples=args.walk_samples)
    payload = risk.to_dict()
    payload["sd_closed_form"] = float(sd(cps))
    _emit_json(args, payload)


def cmd_mn(args):
    est = walk_max_expectation(args.n, args.samples, args.seed, args.threads)
    _emit_json(args, {"n": args.n, **est.to_dict(), "levy_bound": levy_bound(args.n)})


# --- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="monocone", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"monocone {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", help="output file (default: stdout)")
        if seed:
            p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        p.add_argument("--threads", type=int, default=None, help="worker threads (default $MONOCONE_THREADS or 1)")

    def cps_args(p, variant_default="plain"):
        p.add_argument("--n", type=int, required=True)
        p.add_argument("--indices", type=_indices, help="comma-separated 1-based change points")
        p.add_argument("--variant", choices=("plain", "nonneg"), default=variant_default)

    p = sub.add_parser("statdim", help="closed-form SD for change-point layouts")
    cps_args(p)
    p.add_argument("--k", type=int)
    p.add_argument("--k-max", type=int, help="sweep k from --k to --k-max")
    p.add_argument("--placement", default="uniform", help="comma-separated: " + ",".join(PLACEMENTS))
    p.add_argument("--samples", type=int, default=1000, help="placements averaged for 'uniform'")
    common(p)
    p.set_defaults(func=cmd_statdim)

    p = sub.add_parser("curves", help="average-case curve vs non-negative l1 curve")
    p.add_argument("--grid", type=int, default=2000)
    common(p, seed=False)
    p.set_defaults(func=cmd_curves)

    for name, fn, helptext in (("project", cmd_project, "project a CSV vector onto a cone"),
                               ("mc-sd", cmd_mc_sd, "Monte Carlo statistical dimension")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--cone", choices=("chain", "nonneg_chain", "nonpos_chain", "descent"), default="descent")
        p.add_argument("--n", type=int, required=(name == "mc-sd"))
        p.add_argument("--indices", type=_indices)
        p.add_argument("--variant", choices=("plain", "nonneg"), default="plain")
        if name == "project":
            p.add_argument("--input", required=True)
        else:
            p.add_argument("--samples", type=int, default=100_000)
        common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("phase-sweep", help="empirical recovery probability over m")
    cps_args(p)
    p.add_argument("--k", type=int)
    p.add_argument("--placement", choices=PLACEMENTS, default="uniform")
    p.add_argument("--m-min", type=int, required=True)
    p.add_argument("--m-max", type=int, required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--emit-ptc", action="store_true", help="append the closed-form SD per row")
    common(p)
    p.set_defaults(func=cmd_phase_sweep)

    p = sub.add_parser("compare-l1", help="monotone recovery vs sparse non-negative l1 recovery")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--m-min", type=int, required=True)
    p.add_argument("--m-max", type=int, required=True)
    p.add_argument("--trials", type=int, default=100)
    common(p)
    p.set_defaults(func=cmd_compare_l1)

    p = sub.add_parser("denoise", help="prox denoising of a CSV observation")
    p.add_argument("--input", required=True)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--auto-lambda", action="store_true", help="lambda = tau_avg * sigma")
    p.add_argument("--sigma", type=float)
    p.add_argument("--indices", type=_indices, help="change points (the last one sets tau_avg)")
    p.add_argument("--variant", choices=("plain", "nonneg"), default="nonneg")
    p.add_argument("--samples", type=int, default=1_000_000, help="random-walk samples for tau_avg")
    common(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("risk", help="Monte Carlo minimax denoising risk")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--indices", type=_indices, required=True)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--walk-samples", type=int, default=200_000)
    common(p)
    p.set_defaults(func=cmd_risk)

    p = sub.add_parser("mn", help="expected truncated maximum of a Gaussian random walk")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--samples", type=int, default=1_000_000)
    common(p)
    p.set_defaults(func=cmd_mn)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is None:
        args.threads = default_threads()
    if args.threads < 1:
        parser.error(f"--threads: must be >= 1, got {args.threads}")
    try:
        args.func(args)
    except QpFailure as exc:
        print(f"monocone {args.command}: solver failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"monocone {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
