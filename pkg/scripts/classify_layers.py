"""Classify every layer of a reference network on one platform profile.

Prints the useful-density window and the class the pruning controller would
assign, which is how it decides which layers to exclude up front.
"""
import argparse

from sparsecnn.nets import ALEXNET, GOOGLENET
from sparsecnn.perf_model import classify_layer, layer_cost, load_profile, useful_sparsity_window


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("net", choices=["alexnet", "googlenet"])
    ap.add_argument("--profile", default="bdw", help="preset name or JSON file")
    ap.add_argument("--batch", type=int, default=1)
    args = ap.parse_args(argv)

    prof = load_profile(args.profile)
    layers = ALEXNET if args.net == "alexnet" else GOOGLENET
    print(f"profile {prof.name}: F={prof.flops:.3g} FLOP/s, B={prof.bandwidth:.3g} B/s, "
          f"alpha={prof.alpha}, beta={prof.beta}")
    counts = {}
    for name, spec in layers.items():
        cls = classify_layer(spec, args.batch, prof)
        win = useful_sparsity_window(layer_cost(spec, args.batch), prof)
        counts[cls.value] = counts.get(cls.value, 0) + 1
        print(f"{name:<28}{cls.value:<24}x_lower={win.x_lower_useful:<10.4f}x_upper={win.x_upper_useful:.4f}")
    print(", ".join(f"{k}: {v}" for k, v in sorted(counts.items())))


if __name__ == "__main__":
    main()
