"""Measure AlexNet conv2-5 across a density grid, then fit alpha.

Runs dense direct, sparse direct and sparse lowered on this machine, writes
the records to CSV, prints the effective FLOP/s table and the alpha fitted
from the compute-bound points.  Without ``--profile`` the model uses the
measured dense-direct rate as F, so alpha is relative to that baseline.
"""
import argparse
import statistics

from sparsecnn import bench
from sparsecnn.perf_model import PlatformProfile, layer_cost, load_profile, project_times


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--profile", help="preset name or calibrated JSON")
    ap.add_argument("--steps", type=int, default=8, help="grid points from 1.0 down to 0.05")
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--out", default="alexnet_sweep.csv")
    args = ap.parse_args(argv)

    layers = tuple(bench.parse_layer(f"alexnet-conv{i}") for i in range(2, 6))
    spec = bench.SweepSpec(layers=layers, grid=bench.geometric_grid(1.0, 0.05, args.steps),
                           reps=args.reps, variants=("dense_direct", "sparse_direct", "sparse_lowered"))
    records = bench.run_sweep(spec, out=args.out)
    if args.profile:
        prof = load_profile(args.profile)
    else:
        dense = statistics.median(r.effective_flops for r in records if r.variant == "dense_direct")
        prof = PlatformProfile("local", dense, bench.calibrate_bandwidth(0.5))
    print(f"{'layer':<16}{'variant':<16}{'x':>8}{'ms':>10}{'GFLOP/s eff':>14}{'speedup':>10}{'model':>8}")
    for r in records:
        model = 1.0 if r.variant.startswith("dense") else project_times(layer_cost(r.spec, r.batch), r.x, prof).speedup
        print(f"{r.layer:<16}{r.variant:<16}{r.x:>8.3f}{r.median_time * 1e3:>10.2f}"
              f"{r.effective_flops / 1e9:>14.1f}{r.speedup:>10.2f}{model:>8.2f}")
    print("measured alpha at x=1:", {k: round(v, 2) for k, v in bench.measured_alpha(records).items()})
    try:
        print(f"fitted alpha: {bench.fit_alpha(records, prof):.2f}")
    except ValueError as exc:
        print(f"alpha fit skipped: {exc}")


if __name__ == "__main__":
    main()
