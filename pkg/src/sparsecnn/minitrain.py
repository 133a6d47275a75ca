"""A small CNN (two conv layers + one FC) trained with SGD and L1 soft-thresholding.

It is just big enough to give the GSL controller real sparsity trajectories.
Training runs batched im2col/GEMM in numpy; inference can also go through the
sparse kernels (:meth:`ToyNet.predict_sparse`) to check they agree.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import conv as conv_engine
from .gsl import Action, GslConfig, GslReport, LayerStatus, PruneDirective, PruneLayerState, write_trajectory
from .io import save_tensor
from .tensor import LayerSpec, Tensor3, Tensor4, sparsify

log = logging.getLogger(__name__)

__all__ = [
    "Layer",
    "ToyNet",
    "TrainConfig",
    "TrainingDiverged",
    "make_toynet",
    "synth_dataset",
    "train_step",
    "train",
    "prune_pass",
    "apply_directives",
    "accuracy",
    "MiniTrainSource",
    "DemoConfig",
    "run_gsl_demo",
]


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# data


def synth_dataset(seed: int, n_samples: int, classes: int = 4, size: int = 12,
                  noise: float = 0.3, constant: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Oriented sinusoidal gratings, one orientation band per class.

    Phase and frequency are random, so the class is not a linear function of
    the pixels.  ``constant=True`` returns identical blank images (a control
    where nothing can be learned).  Labels are exactly balanced.
    """
    if n_samples < 1 or classes < 2:
        raise ValueError("need n_samples >= 1 and classes >= 2")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_samples) % classes)
    if constant:
        return np.zeros((n_samples, 1, size, size), np.float32), labels.astype(np.int64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    band = np.pi / classes
    theta = labels * band + rng.uniform(-0.25, 0.25, n_samples) * band
    freq = rng.uniform(0.15, 0.3, n_samples) * 2 * np.pi
    phase = rng.uniform(0, 2 * np.pi, n_samples)
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    img = np.sin(freq[:, None, None] * proj + phase[:, None, None])
    img += noise * rng.standard_normal(img.shape)
    return img[:, None].astype(np.float32), labels.astype(np.int64)


# ---------------------------------------------------------------------------
# network


@dataclass
class Layer:
    name: str
    spec: LayerSpec
    weight: np.ndarray
    bias: np.ndarray
    mask: Optional[np.ndarray] = None
    # "dense": never pruned, "active": pruned + L1, "frozen": zero pattern fixed
    mode: str = "active"

    @property
    def is_fc(self) -> bool:
        return self.weight.ndim == 2

    def density(self) -> float:
        return np.count_nonzero(self.weight) / self.weight.size


class ToyNet:
    """conv -> ReLU -> conv -> ReLU -> FC -> softmax."""

    def __init__(self, layers: Sequence[Layer], classes: int):
        self.layers: "OrderedDict[str, Layer]" = OrderedDict((l.name, l) for l in layers)
        self.classes = classes
        convs = [l for l in layers if not l.is_fc]
        for a, b in zip(convs, convs[1:]):
            if (a.spec.N, a.spec.H_out, a.spec.W_out) != (b.spec.C, b.spec.H_in, b.spec.W_in):
                raise ValueError(f"{a.name} output does not feed {b.name}")
        fc = layers[-1]
        last = convs[-1].spec
        if not fc.is_fc or fc.weight.shape != (classes, last.N * last.H_out * last.W_out):
            raise ValueError("last layer must be FC from the flattened conv output to classes")
        if self.param_count() > 10 ** 6:
            raise ValueError("ToyNet is meant to stay under 1e6 parameters")

    def param_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers.values())

    def layer_specs(self) -> "OrderedDict[str, LayerSpec]":
        return OrderedDict((k, l.spec) for k, l in self.layers.items())

    def densities(self) -> Dict[str, float]:
        return {k: l.density() for k, l in self.layers.items()}

    def parameters(self):
        for l in self.layers.values():
            yield l.name + ".weight", l.weight
            yield l.name + ".bias", l.bias

    # -- batched forward / backward -------------------------------------------

    def forward(self, x: np.ndarray):
        cache = []
        h = x
        for l in self.layers.values():
            if l.is_fc:
                flat = h.reshape(h.shape[0], -1)
                cache.append((l, flat))
                h = flat @ l.weight.T + l.bias
            else:
                cols = _im2col_batch(h, l.spec)
                out = np.einsum("nk,bkp->bnp", l.weight.reshape(l.spec.N, -1), cols, optimize=True)
                out = out.reshape((h.shape[0],) + l.spec.output_shape) + l.bias[:, None, None]
                cache.append((l, cols, h.shape))
                h = np.maximum(out, 0)
                cache.append(("relu", h))
        return h, cache

    def backward(self, cache, dlogits: np.ndarray) -> Dict[str, np.ndarray]:
        grads = {}
        d = dlogits
        for item in reversed(cache):
            if item[0] == "relu":
                d = d * (item[1] > 0)
                continue
            l = item[0]
            if l.is_fc:
                flat = item[1]
                grads[l.name + ".weight"] = d.T @ flat
                grads[l.name + ".bias"] = d.sum(axis=0)
                d = (d @ l.weight).reshape(-1, *self._fc_input_shape())
            else:
                cols, in_shape = item[1], item[2]
                s = l.spec
                dout = d.reshape(d.shape[0], s.N, -1)
                w2 = l.weight.reshape(s.N, -1)
                grads[l.name + ".weight"] = np.einsum("bnp,bkp->nk", dout, cols, optimize=True).reshape(l.weight.shape)
                grads[l.name + ".bias"] = dout.sum(axis=(0, 2))
                dcols = np.einsum("nk,bnp->bkp", w2, dout, optimize=True)
                d = _col2im_batch(dcols, s, in_shape)
        return grads

    def _fc_input_shape(self):
        last = [l for l in self.layers.values() if not l.is_fc][-1].spec
        return last.output_shape

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
        logits, cache = self.forward(x)
        loss, dlogits = softmax_cross_entropy(logits, y)
        return loss, self.backward(cache, dlogits)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0].argmax(axis=1)

    def predict_sparse(self, x: np.ndarray) -> np.ndarray:
        """Logits computed image by image with the direct sparse kernels."""
        kernels = {k: sparsify(Tensor4(_as4(l.weight)), l.spec) for k, l in self.layers.items()}
        outs = []
        for img in x:
            h = Tensor3(img)
            for k, l in self.layers.items():
                if l.is_fc:
                    flat = h.data.reshape(-1, 1)
                    outs.append(conv_engine.fc_spmdm(kernels[k], flat, l.bias)[:, 0])
                else:
                    o = conv_engine.conv_sparse_direct(h, kernels[k], l.spec, l.bias)
                    h = Tensor3(np.maximum(o.data, 0))
        return np.stack(outs)

    def save(self, directory) -> None:
        """Write every weight tensor as a SCKT file named ``<layer>.sckt``."""
        from pathlib import Path

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k, l in self.layers.items():
            save_tensor(Tensor4(_as4(l.weight)), d / f"{k}.sckt")


def _as4(w: np.ndarray) -> np.ndarray:
    return w if w.ndim == 4 else w.reshape(w.shape[0], w.shape[1], 1, 1)


def _im2col_batch(x: np.ndarray, s: LayerSpec) -> np.ndarray:
    p = s.pad
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (s.R, s.S), axis=(2, 3))[:, :, ::s.stride, ::s.stride]
    # (B, C, Ho, Wo, R, S) -> (B, C, R, S, Ho, Wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3)
    return np.ascontiguousarray(cols).reshape(x.shape[0], s.C * s.R * s.S, s.H_out * s.W_out)


def _col2im_batch(dcols: np.ndarray, s: LayerSpec, in_shape) -> np.ndarray:
    b = in_shape[0]
    d6 = dcols.reshape(b, s.C, s.R, s.S, s.H_out, s.W_out)
    dx = np.zeros((b, s.C, s.H_pad, s.W_pad), dcols.dtype)
    st = s.stride
    for r in range(s.R):
        for c in range(s.S):
            dx[:, :, r:r + st * (s.H_out - 1) + 1:st, c:c + st * (s.W_out - 1) + 1:st] += d6[:, :, r, c]
    p = s.pad
    return dx[:, :, p:p + s.H_in, p:p + s.W_in] if p else dx


def softmax_cross_entropy(logits: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), y].mean()
    d = np.exp(logp)
    d[np.arange(n), y] -= 1
    return float(loss), d / n


def make_toynet(seed: int, classes: int = 4, size: int = 12, channels: Tuple[int, int] = (8, 16),
                stride2: int = 1, dtype=np.float32) -> ToyNet:
    """Two 3x3 same-padded conv layers (He-initialized) and an FC classifier."""
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    s1 = LayerSpec(N=c1, C=1, R=3, S=3, H_in=size, W_in=size, stride=1, pad=1)
    s2 = LayerSpec(N=c2, C=c1, R=3, S=3, H_in=size, W_in=size, stride=stride2, pad=1)
    k = c2 * s2.H_out * s2.W_out
    s3 = LayerSpec.fully_connected(classes, k)

    def he(shape, fan_in):
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)

    layers = [
        Layer("conv1", s1, he(s1.weight_shape, 9), np.zeros(c1, dtype)),
        Layer("conv2", s2, he(s2.weight_shape, 9 * c1), np.zeros(c2, dtype)),
        # small head so the initial softmax is close to uniform
        Layer("fc", s3, (0.01 * rng.standard_normal((classes, k))).astype(dtype), np.zeros(classes, dtype)),
    ]
    return ToyNet(layers, classes)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    seed: int
    lr: float = 1e-3
    momentum: float = 0.9
    l1: Union[float, Dict[str, float]] = 5e-5
    # final prune threshold as a multiple of each layer's initial weight std,
    # reached linearly after threshold_ramp iterations
    prune_threshold: Union[float, Dict[str, float]] = 0.0
    threshold_ramp: int = 1
    prune_every: int = 50
    batch_size: int = 32
    max_iterations: int = 5000
    retrain_iterations: int = 0
    retrain_lr_factor: float = 0.1

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("TrainConfig.seed is required")
        if self.lr < 0 or self.batch_size < 1 or self.max_iterations < 0:
            raise ValueError("lr must be >= 0, batch_size >= 1, max_iterations >= 0")
        if self.threshold_ramp < 1 or self.prune_every < 1:
            raise ValueError("threshold_ramp and prune_every must be >= 1")

    def per_layer(self, value, name: str) -> float:
        return float(value.get(name, 0.0)) if isinstance(value, dict) else float(value)


@dataclass
class TrainState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    init_std: Dict[str, float] = field(default_factory=dict)
    iteration: int = 0


def train_step(net: ToyNet, xb: np.ndarray, yb: np.ndarray, config: TrainConfig,
               state: Optional[TrainState] = None, lr: Optional[float] = None) -> float:
    """One SGD-with-momentum step followed by the L1 proximal step; returns the loss."""
    state = state if state is not None else TrainState()
    lr = config.lr if lr is None else lr
    loss, grads = net.loss_and_grads(xb, yb)
    if not np.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss {loss} at iteration {state.iteration} (lr={lr}); "
            f"max |w| = {max(float(np.abs(l.weight).max()) for l in net.layers.values()):.3g}"
        )
    for l in net.layers.values():
        for suffix, param in ((".weight", l.weight), (".bias", l.bias)):
            key = l.name + suffix
            g = grads[key]
            if suffix == ".weight" and l.mask is not None:
                g = g * l.mask
            v = state.velocity.get(key)
            v = g if v is None else config.momentum * v + g
            state.velocity[key] = v
            param -= (lr * v).astype(param.dtype)
        if l.mode == "active":
            shrink = lr * config.per_layer(config.l1, l.name)
            if shrink > 0:
                l.weight[...] = np.sign(l.weight) * np.maximum(np.abs(l.weight) - shrink, 0)
            # zeros produced by the proximal step stay zero
            l.mask = l.weight != 0 if l.mask is None else l.mask & (l.weight != 0)
        if l.mask is not None:
            l.weight *= l.mask
    state.iteration += 1
    return loss


def apply_directives(net: ToyNet, directives: Iterable[PruneDirective],
                     snapshots: Mapping[str, np.ndarray]) -> None:
    for d in directives:
        l = net.layers[d.layer]
        if d.action is Action.STOP_PRUNING:
            l.mode = "frozen"
            l.mask = l.weight != 0
        elif d.action is Action.RESTORE_DENSE:
            l.weight[...] = snapshots[d.layer]
            l.mask = None
            l.mode = "dense"


def prune_pass(net: ToyNet, thresholds: Mapping[str, float],
               directives: Iterable[PruneDirective] = (),
               snapshots: Optional[Mapping[str, np.ndarray]] = None) -> Dict[str, float]:
    """Zero ``|w| < threshold`` in ACTIVE layers and return every layer's density.

    Directives are applied first.  Dense (excluded/restored) layers are left
    alone; frozen layers only have their zero mask re-applied.
    """
    apply_directives(net, directives, snapshots or {})
    for name, l in net.layers.items():
        if l.mode == "active":
            thr = float(thresholds.get(name, 0.0))
            keep = np.abs(l.weight) >= thr if thr > 0 else np.ones(l.weight.shape, bool)
            keep &= l.weight != 0
            l.mask = keep if l.mask is None else l.mask & keep
        if l.mode != "dense" and l.mask is not None:
            l.weight *= l.mask
    return net.densities()


def accuracy(net: ToyNet, x: np.ndarray, y: np.ndarray, batch: int = 256) -> float:
    pred = np.concatenate([net.predict(x[i:i + batch]) for i in range(0, len(x), batch)])
    return float(np.mean(pred == y))


def _batches(rng, n, batch_size):
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]


def _thresholds(net: ToyNet, config: TrainConfig, state: TrainState, it: int) -> Dict[str, float]:
    ramp = min(1.0, it / config.threshold_ramp)
    return {k: ramp * config.per_layer(config.prune_threshold, k) * state.init_std[k]
            for k in net.layers}


def train(net: ToyNet, data: Tuple[np.ndarray, np.ndarray], config: TrainConfig,
          prune: bool = True, callback=None) -> List[float]:
    """Plain training loop (no controller); returns the per-step losses.

    With ``prune`` every layer in ``active`` mode is thresholded each
    ``prune_every`` steps.  The optional re-training phase freezes all masks
    and lowers the learning rate.
    """
    x, y = data
    rng = np.random.default_rng(config.seed)
    state = TrainState(init_std={k: float(l.weight.std()) for k, l in net.layers.items()})
    losses = []
    batches = _batches(rng, len(x), min(config.batch_size, len(x)))
    for it in range(1, config.max_iterations + 1):
        idx = next(batches)
        losses.append(train_step(net, x[idx], y[idx], config, state))
        if prune and it % config.prune_every == 0:
            prune_pass(net, _thresholds(net, config, state, it))
        if callback is not None:
            callback(it, net)
    if config.retrain_iterations:
        for l in net.layers.values():
            if l.mode == "active":
                l.mode = "frozen"
        for _ in range(config.retrain_iterations):
            idx = next(batches)
            losses.append(train_step(net, x[idx], y[idx], config, state,
                                     lr=config.lr * config.retrain_lr_factor))
    return losses


class MiniTrainSource:
    """Live trajectory source: trains the ToyNet between controller checks."""

    def __init__(self, net: ToyNet, data: Tuple[np.ndarray, np.ndarray], config: TrainConfig):
        self.net = net
        self.data = data
        self.config = config
        self.rows: List[Tuple[int, str, float]] = []
        self.snapshots: Dict[str, np.ndarray] = {}
        self.losses: List[float] = []

    def layer_specs(self):
        return self.net.layer_specs()

    def start(self, states: Mapping[str, PruneLayerState]) -> None:
        for name, st in states.items():
            l = self.net.layers[name]
            if st.status is LayerStatus.EXCLUDED:
                l.mode, l.mask = "dense", None
            else:
                l.mode = "active"
                self.snapshots[name] = l.weight.copy()
                st.dense_snapshot = self.snapshots[name]
        self.rows.extend((0, k, v) for k, v in self.net.densities().items())

    def observations(self, gsl_config: GslConfig):
        cfg = self.config
        x, y = self.data
        rng = np.random.default_rng(cfg.seed)
        state = TrainState(init_std={k: float(l.weight.std()) for k, l in self.net.layers.items()})
        batches = _batches(rng, len(x), min(cfg.batch_size, len(x)))
        for it in range(1, cfg.max_iterations + 1):
            idx = next(batches)
            self.losses.append(train_step(self.net, x[idx], y[idx], cfg, state))
            if it % cfg.prune_every == 0:
                prune_pass(self.net, _thresholds(self.net, cfg, state, it))
            if it % gsl_config.check_period == 0:
                dens = self.net.densities()
                self.rows.extend((it, k, v) for k, v in dens.items())
                yield it, {k: v for k, v in dens.items() if self.net.layers[k].mode == "active"}

    def apply(self, states, directives: List[PruneDirective]) -> None:
        acted = [d for d in directives if d.action is not Action.CONTINUE]
        for d in acted:
            log.info("iteration %d: %s -> %s", d.iteration, d.layer, d.action.value)
        apply_directives(self.net, acted, self.snapshots)

    def restored_density(self, layer: str) -> float:
        return self.net.layers[layer].density()

    def write_trajectory(self, path) -> None:
        write_trajectory(path, self.rows)


# ---------------------------------------------------------------------------
# end-to-end demo


@dataclass
class DemoConfig:
    """Everything ``gsl-demo`` reads from its JSON config (all keys optional)."""

    seed: int = 0
    profile: Union[str, dict] = "atom"
    n_samples: int = 1024
    classes: int = 4
    noise: float = 0.3
    train: dict = field(default_factory=lambda: dict(
        lr=0.02, l1=1e-3, prune_threshold=2.0, threshold_ramp=1500, max_iterations=3000))
    check_period: int = 100
    stabilization_window: int = 3
    stabilization_epsilon: float = 0.01
    manual_exclude: Tuple[str, ...] = ()
    report: Optional[str] = None
    trajectory: Optional[str] = None
    checkpoint_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "DemoConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown gsl-demo config keys: {sorted(extra)}")
        kw = dict(d)
        if "train" in kw:
            kw["train"] = {**cls().train, **kw["train"]}
        kw["manual_exclude"] = tuple(kw.get("manual_exclude", ()))
        return cls(**kw)


@dataclass
class DemoResult:
    report: GslReport
    net: ToyNet
    source: MiniTrainSource
    train_accuracy: float


def run_gsl_demo(cfg: DemoConfig) -> DemoResult:
    from .gsl import gsl_run
    from .perf_model import PlatformProfile, load_profile

    profile = (PlatformProfile.from_dict(cfg.profile) if isinstance(cfg.profile, dict)
               else load_profile(cfg.profile))
    data = synth_dataset(cfg.seed, cfg.n_samples, cfg.classes, noise=cfg.noise)
    net = make_toynet(cfg.seed + 1, classes=cfg.classes)
    tcfg = TrainConfig(seed=cfg.seed, **cfg.train)
    gcfg = GslConfig(profile, check_period=cfg.check_period,
                     stabilization_window=cfg.stabilization_window,
                     stabilization_epsilon=cfg.stabilization_epsilon,
                     max_iterations=tcfg.max_iterations, manual_exclude=cfg.manual_exclude)
    source = MiniTrainSource(net, data, tcfg)
    report = gsl_run(source, gcfg)
    if cfg.report:
        report.to_json(cfg.report)
    if cfg.trajectory:
        source.write_trajectory(cfg.trajectory)
    if cfg.checkpoint_dir:
        net.save(cfg.checkpoint_dir)
    return DemoResult(report, net, source, accuracy(net, *data))
