"""Command line entry point: ``sparsecnn <subcommand> ...``.

Exit codes: 0 ok, 1 usage/input error, 2 validation-gate failure,
3 calibration instability.  ``THREADS`` in the environment sets the kernel
thread count unless ``--threads`` is given.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from typing import List, Optional, Sequence

from . import bench
from .conv import set_threads
from .perf_model import classify_layer, layer_cost, load_profile, project_times, save_profile, useful_sparsity_window

EXIT_VALIDATION = 2
EXIT_CALIBRATION = 3


def expand_layers(items: Sequence[str]) -> List[str]:
    """Expand ``alexnet-conv2..5`` into ``alexnet-conv2 ... alexnet-conv5``."""
    out = []
    for item in items:
        m = re.fullmatch(r"(.*?)(\d+)\.\.(\d+)", item.strip())
        if m:
            lo, hi = int(m.group(2)), int(m.group(3))
            out.extend(f"{m.group(1)}{i}" for i in range(lo, hi + 1))
        else:
            out.append(item)
    return out


def parse_grid(text: str):
    parts = text.split(":")
    if len(parts) == 3:
        return bench.geometric_grid(float(parts[0]), float(parts[1]), int(parts[2]))
    return tuple(float(v) for v in text.split(","))


def _cmd_calibrate(args) -> int:
    try:
        profile = bench.calibrate(runs=args.runs, seconds=args.seconds, tolerance=args.tolerance,
                                  name=args.name, alpha=args.alpha, beta=args.beta)
    except bench.CalibrationUnstable as exc:
        print(f"calibration unstable: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    if args.out:
        save_profile(profile, args.out)
    print(json.dumps(profile.to_dict(), indent=2))
    return 0


def _cmd_sweep(args) -> int:
    layers = tuple(bench.parse_layer(l) for l in expand_layers(args.layer))
    spec = bench.SweepSpec(layers=layers, grid=parse_grid(args.grid), batch=args.batch,
                           reps=args.reps, warmup=args.warmup, threads=args.threads,
                           mode=args.mode, seed=args.seed,
                           variants=tuple(args.variants.split(",")) if args.variants else None)
    profile = load_profile(args.profile) if args.profile else None
    try:
        records = bench.run_sweep(spec, profile, out=args.out)
    except bench.ValidationError as exc:
        print(f"validation gate failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"{'layer':<16}{'x':>8}  {'variant':<15}{'ms':>10}{'GFLOP/s':>10}{'speedup':>9}")
    for r in records:
        print(f"{r.layer:<16}{r.x:>8.4f}  {r.variant:<15}{r.median_time * 1e3:>10.3f}"
              f"{r.effective_flops / 1e9:>10.1f}{r.speedup:>9.2f}")
    for layer, a in bench.measured_alpha(records).items():
        print(f"measured alpha ({layer}, densest point): {a:.2f}")
    return 0


def _cmd_project(args) -> int:
    profile = load_profile(args.profile)
    _, spec = bench.parse_layer(args.layer)
    cost = layer_cost(spec, args.batch, padded_input=not args.unpadded)
    window = useful_sparsity_window(cost, profile)
    out = {
        "profile": profile.to_dict(),
        "layer": list(spec.fields()),
        "cost": {"flops": cost.flops, "activation_bytes": cost.activation_bytes,
                 "weight_bytes": cost.weight_bytes},
        "window": window.to_dict(),
        "class": classify_layer(spec, args.batch, profile, padded_input=not args.unpadded).value,
        "projections": [dict(x=x, **project_times(cost, x, profile)._asdict()) for x in args.x],
    }
    print(json.dumps(out, indent=2))
    return 0


def _cmd_fit_alpha(args) -> int:
    records = bench.read_records(args.records)
    profile = load_profile(args.profile)
    alpha = bench.fit_alpha(records, profile, variant=args.variant)
    fitted = profile.with_alpha(alpha)
    print(f"alpha = {alpha:.3f}  (x_upper_useful = 1/alpha = {1 / alpha:.3f})")
    if args.out:
        save_profile(fitted, args.out)
    return 0


def _cmd_gsl_demo(args) -> int:
    from .minitrain import DemoConfig, run_gsl_demo

    with open(args.config) as f:
        cfg = DemoConfig.from_dict(json.load(f))
    if args.out:
        cfg.report = args.out
    result = run_gsl_demo(cfg)
    rep = result.report
    print(f"stopped after {rep.iterations} iterations, train accuracy {result.train_accuracy:.3f}")
    for row in rep.layers:
        print(f"  {row['id']:<10}{row['status']:<20}x={row['final_density']:.3f}  "
              f"projected speedup {row['projected_speedup']:.2f}")
    print(f"net projected speedup {rep.net_speedup:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsecnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="measure FLOP/s and bandwidth, write a profile")
    c.add_argument("--runs", type=int, default=3)
    c.add_argument("--seconds", type=float, default=1.0, help="work per measurement")
    c.add_argument("--tolerance", type=float, default=0.2)
    c.add_argument("--name", default="local")
    c.add_argument("--alpha", type=float, default=3.0)
    c.add_argument("--beta", type=float, default=2.0)
    c.add_argument("--out", help="profile JSON path")
    c.set_defaults(func=_cmd_calibrate)

    s = sub.add_parser("sweep", help="time kernels over a density grid")
    s.add_argument("--layer", action="append", required=True,
                   help="preset (alexnet-conv2, alexnet-conv2..5) or N,C,R,S,H,W[,stride[,pad]]; repeatable")
    s.add_argument("--grid", default="1.0:0.01:20", help="from:to:steps (geometric) or a comma list")
    s.add_argument("--batch", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--reps", type=int, default=5)
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--mode", choices=("magnitude", "random"), default="magnitude")
    s.add_argument("--variants", help="comma list, default all for the layer type")
    s.add_argument("--profile", help="profile JSON or preset name, adds model columns")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="CSV path")
    s.set_defaults(func=_cmd_sweep)

    pr = sub.add_parser("project", help="print model times for a layer")
    pr.add_argument("--profile", required=True, help="profile JSON or preset (atom, bdw, knl)")
    pr.add_argument("--layer", required=True)
    pr.add_argument("--x", type=float, nargs="+", default=[1.0])
    pr.add_argument("--batch", type=int, default=1)
    pr.add_argument("--unpadded", action="store_true", help="count the unpadded input in S_A")
    pr.set_defaults(func=_cmd_project)

    f = sub.add_parser("fit-alpha", help="fit alpha to sweep records")
    f.add_argument("--records", required=True)
    f.add_argument("--profile", required=True)
    f.add_argument("--variant", default="sparse_direct")
    f.add_argument("--out", help="write the profile with the fitted alpha")
    f.set_defaults(func=_cmd_fit_alpha)

    g = sub.add_parser("gsl-demo", help="train the toy net under the GSL controller")
    g.add_argument("--config", required=True)
    g.add_argument("--out", help="report JSON path (overrides the config)")
    g.set_defaults(func=_cmd_gsl_demo)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = getattr(args, "threads", None)
    if threads is None and os.environ.get("THREADS"):
        threads = int(os.environ["THREADS"])
        if hasattr(args, "threads"):
            args.threads = threads
    if threads is not None:
        set_threads(threads)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
