"""Projected speedup versus non-zero density for AlexNet and GoogLeNet layers.

Writes one CSV row per (network, layer, profile, x) and prints the useful
window of each layer.  Plot ``speedup`` against ``x`` on log axes to get the
familiar roofline-shaped curves.
"""
import argparse
import csv
import sys

from sparsecnn.bench import geometric_grid
from sparsecnn.nets import ALEXNET, GOOGLENET
from sparsecnn.perf_model import layer_cost, load_profile, project_times, useful_sparsity_window

DEFAULT_LAYERS = {
    "alexnet": ["conv2", "conv3", "conv4", "conv5"],
    "googlenet": ["inception_4a/3x3", "inception_4a/5x5", "inception_4a/5x5_reduce",
                  "inception_4e/3x3"],
}
NETS = {"alexnet": ALEXNET, "googlenet": GOOGLENET}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--profiles", nargs="+", default=["bdw", "knl"])
    ap.add_argument("--grid", default="1.0:0.001:31", help="from:to:steps (geometric)")
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--lowered", action="store_true", help="charge lowering's activation replication")
    ap.add_argument("--out", default="-")
    args = ap.parse_args(argv)

    a, b, n = args.grid.split(":")
    grid = geometric_grid(float(a), float(b), int(n))
    profiles = [load_profile(p) for p in args.profiles]
    out = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(out)
    w.writerow(["net", "layer", "profile", "x", "speedup", "bound"])
    summary = []
    for net, names in DEFAULT_LAYERS.items():
        for name in names:
            cost = layer_cost(NETS[net][name], args.batch, lowered=args.lowered)
            for prof in profiles:
                win = useful_sparsity_window(cost, prof)
                summary.append((net, name, prof.name, win))
                for x in grid:
                    p = project_times(cost, x, prof)
                    bound = "compute" if p.t_sparse_compute >= p.t_sparse_bw else "bandwidth"
                    w.writerow([net, name, prof.name, f"{x:.6g}", f"{p.speedup:.6g}", bound])
    if out is not sys.stdout:
        out.close()
    for net, name, prof, win in summary:
        span = (f"[{win.x_lower_useful:.4f}, {win.x_upper_useful:.4f}]"
                if win.has_speedup_potential else "none")
        print(f"{net:<10}{name:<26}{prof:<6}useful window {span}", file=sys.stderr)


if __name__ == "__main__":
    main()
