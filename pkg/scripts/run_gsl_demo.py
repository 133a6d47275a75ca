"""Train the toy CNN under the pruning controller and compare against
unguided pruning of every layer.

The guided run excludes layers the model says cannot speed up and stops
pruning a layer once it reaches its lower useful density.  The unguided run
applies the same schedule to all layers.
"""
import argparse
import json

from sparsecnn.minitrain import DemoConfig, TrainConfig, accuracy, make_toynet, run_gsl_demo, synth_dataset, train
from sparsecnn.perf_model import layer_cost, load_profile, project_times


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config", nargs="?", default="scripts/gsl_demo.json")
    args = ap.parse_args(argv)
    with open(args.config) as f:
        cfg = DemoConfig.from_dict(json.load(f))

    res = run_gsl_demo(cfg)
    print(f"guided: {res.report.iterations} iterations, accuracy {res.train_accuracy:.3f}, "
          f"net projected speedup {res.report.net_speedup:.2f}")
    for row in res.report.layers:
        print(f"  {row['id']:<8}{row['status']:<20}x={row['final_density']:.3f}")

    x, y = synth_dataset(cfg.seed, cfg.n_samples, cfg.classes, noise=cfg.noise)
    net = make_toynet(cfg.seed + 1, cfg.classes)
    train(net, (x, y), TrainConfig(seed=cfg.seed, **cfg.train))
    prof = load_profile(cfg.profile)
    print(f"unguided: accuracy {accuracy(net, x, y):.3f}")
    for name, layer in net.layers.items():
        p = project_times(layer_cost(layer.spec), max(layer.density(), 1e-6), prof)
        print(f"  {name:<8}x={layer.density():.3f}  projected speedup {p.speedup:.2f}")


if __name__ == "__main__":
    main()
