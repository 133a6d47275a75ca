"""Calibration, sparsity sweeps and alpha fitting.

Sweep CSV columns (times in seconds, rates in FLOP/s, densities in [0, 1]):

    layer, geometry, x, variant, batch, threads, reps, inner, median_time,
    effective_flops, speedup, model_t_sparse, model_speedup, model_effective_flops

``geometry`` is ``N,C,R,S,H,W,stride,pad``.  ``speedup`` is relative to
``dense_direct`` on the same layer; the ``model_*`` columns are empty when the
sweep ran without a profile.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from os import PathLike
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import _kernels
from .conv import (
    DEFAULT_TILING,
    TilingConfig,
    conv_dense_direct,
    conv_dense_lowered,
    conv_sparse_direct,
    conv_sparse_lowered,
    fc_spmdm,
)
from .nets import LAYER_PRESETS
from .perf_model import PlatformProfile, layer_cost, project_times
from .tensor import LayerSpec, SparseKernelMatrix, Tensor3, Tensor4, sparsify

log = logging.getLogger(__name__)

__all__ = [
    "CalibrationUnstable",
    "ValidationError",
    "calibrate_flops",
    "calibrate_bandwidth",
    "calibrate",
    "SweepSpec",
    "BenchRecord",
    "geometric_grid",
    "parse_layer",
    "make_sparse_weights",
    "time_call",
    "run_sweep",
    "write_records",
    "read_records",
    "fit_alpha",
    "measured_alpha",
    "model_records",
]

CONV_VARIANTS = ("dense_direct", "dense_lowered", "sparse_direct", "sparse_lowered")
FC_VARIANTS = ("dense_direct", "fc_spmdm")


class CalibrationUnstable(RuntimeError):
    pass


class ValidationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# calibration


def calibrate_flops(seconds: float = 1.0, n: int = 1024) -> float:
    """Sustained SGEMM FLOP/s from repeated ``n x n`` float32 matmuls."""
    rng = np.random.default_rng(0)
    a = rng.standard_normal((n, n), dtype=np.float32)
    b = rng.standard_normal((n, n), dtype=np.float32)
    c = np.empty_like(a)
    np.matmul(a, b, out=c)
    calls = 0
    t0 = time.perf_counter()
    while True:
        np.matmul(a, b, out=c)
        calls += 1
        elapsed = time.perf_counter() - t0
        if elapsed >= seconds:
            return 2.0 * n ** 3 * calls / elapsed


def calibrate_bandwidth(seconds: float = 1.0, n: int = 1 << 25) -> float:
    """Triad ``a = b + s*c`` over float64 arrays; counts 3 * 8 * n bytes per pass.

    The default arrays are 256 MiB each, well beyond any last-level cache.
    """
    b = np.ones(n)
    c = np.full(n, 2.0)
    a = np.empty(n)
    _kernels.triad(a, b, c, 3.0)
    passes = 0
    t0 = time.perf_counter()
    while True:
        _kernels.triad(a, b, c, 3.0)
        passes += 1
        elapsed = time.perf_counter() - t0
        if elapsed >= seconds:
            return 24.0 * n * passes / elapsed


def _stable_median(values: Sequence[float], tolerance: float, what: str) -> float:
    lo, hi = min(values), max(values)
    if hi > lo * (1 + tolerance):
        raise CalibrationUnstable(
            f"{what} varied by {hi / lo - 1:.0%} across {len(values)} runs (> {tolerance:.0%}): {values}"
        )
    return float(np.median(values))


def calibrate(runs: int = 3, seconds: float = 1.0, tolerance: float = 0.2, name: str = "local",
              alpha: float = 3.0, beta: float = 2.0, bandwidth_elems: int = 1 << 25) -> PlatformProfile:
    """Median of ``runs`` FLOP/s and bandwidth measurements as a profile.

    Raises :class:`CalibrationUnstable` if the runs spread by more than
    ``tolerance`` (max/min - 1).
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    f = [calibrate_flops(seconds) for _ in range(runs)]
    bw = [calibrate_bandwidth(seconds, bandwidth_elems) for _ in range(runs)]
    return PlatformProfile(name, _stable_median(f, tolerance, "FLOP/s"),
                           _stable_median(bw, tolerance, "bandwidth"), alpha, beta)


# ---------------------------------------------------------------------------
# sweep configuration


def geometric_grid(start: float, stop: float, steps: int) -> Tuple[float, ...]:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        return (float(start),)
    return tuple(float(v) for v in np.geomspace(start, stop, steps))


def parse_layer(text: str) -> Tuple[str, LayerSpec]:
    """A preset name (``alexnet-conv2``) or ``N,C,R,S,H,W[,stride[,pad]]``."""
    key = text.strip().lower()
    if key in LAYER_PRESETS:
        return key, LAYER_PRESETS[key]
    try:
        vals = [int(v) for v in key.split(",")]
    except ValueError:
        raise ValueError(f"unknown layer {text!r}; use a preset "
                         f"({', '.join(LAYER_PRESETS)}) or N,C,R,S,H,W[,stride[,pad]]") from None
    if not 6 <= len(vals) <= 8:
        raise ValueError(f"layer geometry needs 6 to 8 integers, got {len(vals)}")
    spec = LayerSpec(*vals)
    return ",".join(map(str, spec.fields())), spec


def _parse_geometry(text: str) -> LayerSpec:
    return LayerSpec(*[int(v) for v in text.split(",")])


@dataclass(frozen=True)
class SweepSpec:
    layers: Tuple[Tuple[str, LayerSpec], ...]
    grid: Tuple[float, ...] = geometric_grid(1.0, 0.01, 20)
    batch: Optional[int] = None  # None: one image per kernel thread
    reps: int = 5
    warmup: int = 1
    threads: Optional[int] = None
    mode: str = "magnitude"
    seed: int = 0
    variants: Optional[Tuple[str, ...]] = None
    tiling: TilingConfig = DEFAULT_TILING
    min_time: float = 2e-3

    def __post_init__(self):
        if not self.layers:
            raise ValueError("SweepSpec needs at least one layer")
        if not self.grid or not all(0 < x <= 1 for x in self.grid):
            raise ValueError("density grid must be non-empty and within (0, 1]")
        if self.reps < 3:
            raise ValueError("reps must be >= 3")
        if self.warmup < 0 or (self.batch is not None and self.batch < 1):
            raise ValueError("warmup must be >= 0 and batch >= 1")
        if self.mode not in ("magnitude", "random"):
            raise ValueError("mode must be 'magnitude' or 'random'")

    def variants_for(self, spec: LayerSpec) -> Tuple[str, ...]:
        allowed = FC_VARIANTS if spec.is_fully_connected else CONV_VARIANTS
        if self.variants is None:
            return allowed
        return tuple(v for v in self.variants if v in allowed)


@dataclass
class BenchRecord:
    layer: str
    geometry: str
    x: float
    variant: str
    batch: int
    threads: int
    reps: int
    inner: int
    median_time: float
    effective_flops: float
    speedup: float
    model_t_sparse: Optional[float] = None
    model_speedup: Optional[float] = None
    model_effective_flops: Optional[float] = None

    @property
    def spec(self) -> LayerSpec:
        return _parse_geometry(self.geometry)


COLUMNS = [f.name for f in fields(BenchRecord)]


# ---------------------------------------------------------------------------
# weights and timing


def make_sparse_weights(spec: LayerSpec, x: float, seed: int = 0, mode: str = "magnitude") -> Tensor4:
    """Gaussian weights with exactly ``max(1, round(x * size))`` non-zeros.

    ``magnitude`` keeps the largest |w| (ties go to the lower flat index);
    ``random`` keeps a uniformly random subset.
    """
    if not 0 < x <= 1:
        raise ValueError(f"density must lie in (0, 1], got {x}")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(spec.weight_shape).astype(np.float32).reshape(-1)
    keep = max(1, int(round(x * w.size)))
    if mode == "magnitude":
        idx = np.argsort(-np.abs(w), kind="stable")[:keep]
    elif mode == "random":
        idx = rng.choice(w.size, keep, replace=False)
    else:
        raise ValueError("mode must be 'magnitude' or 'random'")
    out = np.zeros_like(w)
    out[idx] = w[idx]
    return Tensor4(out.reshape(spec.weight_shape))


def time_call(fn: Callable[[], object], reps: int, warmup: int = 1,
              min_time: float = 2e-3) -> Tuple[float, int]:
    """Median seconds per call over ``reps`` samples, and the inner repeat count.

    Calls shorter than ``min_time`` are repeated inside each sample so the
    timer resolution does not dominate.
    """
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    fn()
    once = time.perf_counter() - t0
    floor = max(min_time, 1000 * time.get_clock_info("perf_counter").resolution)
    inner = 1 if once >= floor else int(math.ceil(floor / max(once, 1e-9)))
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner)
    return float(np.median(samples)), inner


class _LayerRunner:
    """Builds callables for each variant of one layer at one density."""

    def __init__(self, spec: LayerSpec, weights: Tensor4, batch: int, seed: int, tiling: TilingConfig):
        self.spec = spec
        self.weights = weights
        self.kernel: SparseKernelMatrix = sparsify(weights, spec)
        self.tiling = tiling
        rng = np.random.default_rng(seed + 1)
        if spec.is_fully_connected:
            self.act = rng.standard_normal((spec.C, batch)).astype(np.float32)
            self.wmat = np.ascontiguousarray(weights.data.reshape(spec.N, spec.C))
        else:
            self.images = [Tensor3(rng.standard_normal(spec.input_shape).astype(np.float32))
                           for _ in range(batch)]

    def fn(self, variant: str) -> Callable[[], np.ndarray]:
        s, k, t = self.spec, self.kernel, self.tiling
        if s.is_fully_connected:
            if variant == "dense_direct":
                return lambda: self.wmat @ self.act
            return lambda: fc_spmdm(k, self.act, tiling=t)
        op = {
            "dense_direct": lambda img: conv_dense_direct(img, self.weights, s),
            "dense_lowered": lambda img: conv_dense_lowered(img, self.weights, s),
            "sparse_direct": lambda img: conv_sparse_direct(img, k, s, tiling=t),
            "sparse_lowered": lambda img: conv_sparse_lowered(img, k, s, tiling=t),
        }[variant]
        return lambda: np.stack([op(img).data for img in self.images])

    def reference(self) -> np.ndarray:
        if self.spec.is_fully_connected:
            return self.wmat.astype(np.float64) @ self.act
        return np.stack([conv_dense_direct(img, self.weights, self.spec).data for img in self.images])


def _validate(runner: _LayerRunner, variants: Iterable[str], rtol: float = 1e-4) -> None:
    ref = runner.reference()
    scale = float(np.abs(ref).max()) or 1.0
    for v in variants:
        got = np.asarray(runner.fn(v)())
        err = float(np.abs(got - ref).max())
        if not np.isfinite(err) or err > rtol * scale:
            raise ValidationError(f"{v} on {runner.spec} disagrees with the dense oracle: "
                                  f"max error {err:.3g} vs scale {scale:.3g}")


def run_sweep(spec: SweepSpec, profile: Optional[PlatformProfile] = None,
              out: Union[str, PathLike, None] = None) -> List[BenchRecord]:
    """Time every variant of every layer at every grid density.

    Each (layer, density) is checked against the dense oracle before timing;
    a mismatch raises :class:`ValidationError`.  Dense variants are re-timed
    at each density so every row is a direct measurement.
    """
    if spec.threads is not None:
        _kernels.set_threads(spec.threads)
    threads = _kernels.get_threads()
    batch = spec.batch if spec.batch is not None else threads
    records: List[BenchRecord] = []
    for name, layer in spec.layers:
        variants = spec.variants_for(layer)
        geometry = ",".join(map(str, layer.fields()))
        cost = layer_cost(layer, batch)
        t_ref = None
        for x in spec.grid:
            weights = make_sparse_weights(layer, x, spec.seed, spec.mode)
            runner = _LayerRunner(layer, weights, batch, spec.seed, spec.tiling)
            _validate(runner, variants)
            x_actual = runner.kernel.density
            proj = project_times(cost, x_actual, profile) if profile is not None else None
            timed = {v: time_call(runner.fn(v), spec.reps, spec.warmup, spec.min_time) for v in variants}
            if "dense_direct" in timed:
                t_ref = timed["dense_direct"][0]
            for v, (t, inner) in timed.items():
                sparse = v not in ("dense_direct", "dense_lowered")
                records.append(BenchRecord(
                    layer=name, geometry=geometry, x=x_actual, variant=v, batch=batch,
                    threads=threads, reps=spec.reps, inner=inner, median_time=t,
                    effective_flops=cost.flops / t,
                    speedup=(t_ref / t) if t_ref else float("nan"),
                    model_t_sparse=(proj.t_sparse if sparse else proj.t_dense) if proj else None,
                    model_speedup=(proj.speedup if sparse else 1.0) if proj else None,
                    model_effective_flops=(proj.effective_flops if sparse else profile.flops) if proj else None,
                ))
            log.info("%s x=%.4f %s", name, x_actual,
                     " ".join(f"{v}={t * 1e3:.3f}ms" for v, (t, _) in timed.items()))
    if out is not None:
        write_records(out, records)
    return records


# ---------------------------------------------------------------------------
# CSV


def write_records(path: Union[str, PathLike], records: Iterable[BenchRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow({k: ("" if v is None else v) for k, v in asdict(r).items()})


def read_records(path: Union[str, PathLike]) -> List[BenchRecord]:
    ints = {"batch", "threads", "reps", "inner"}
    strs = {"layer", "geometry", "variant"}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != COLUMNS:
            raise ValueError(f"{path}: expected columns {COLUMNS}")
        out = []
        for row in reader:
            kw = {}
            for k, v in row.items():
                if k in strs:
                    kw[k] = v
                elif k in ints:
                    kw[k] = int(v)
                else:
                    kw[k] = None if v == "" else float(v)
            out.append(BenchRecord(**kw))
    return out


# ---------------------------------------------------------------------------
# alpha


def fit_alpha(records: Iterable[BenchRecord], profile: PlatformProfile,
              variant: str = "sparse_direct") -> float:
    """Least-squares ``alpha`` (through the origin) of ``t = alpha * x * C / F``.

    Only points the model places in the compute-bound regime are used.
    """
    u, t = [], []
    for r in records:
        if r.variant != variant:
            continue
        cost = layer_cost(r.spec, r.batch)
        proj = project_times(cost, r.x, profile)
        if proj.t_sparse_compute > proj.t_sparse_bw:
            u.append(r.x * cost.flops / profile.flops)
            t.append(r.median_time)
    if len(u) < 2:
        raise ValueError(f"need at least 2 compute-bound {variant} points to fit alpha, got {len(u)}")
    u, t = np.asarray(u), np.asarray(t)
    return float(u @ t / (u @ u))


def measured_alpha(records: Iterable[BenchRecord], layer: Optional[str] = None) -> Dict[str, float]:
    """Sparse-direct over dense-direct time at the densest grid point, per layer."""
    best: Dict[str, Dict[str, BenchRecord]] = {}
    for r in records:
        if layer is not None and r.layer != layer:
            continue
        if r.variant in ("dense_direct", "sparse_direct"):
            slot = best.setdefault(r.layer, {})
            cur = slot.get(r.variant)
            if cur is None or r.x > cur.x:
                slot[r.variant] = r
    return {k: v["sparse_direct"].median_time / v["dense_direct"].median_time
            for k, v in best.items() if len(v) == 2}


def model_records(layers: Sequence[Tuple[str, LayerSpec]], grid: Sequence[float],
                  profile: PlatformProfile, batch: int = 1,
                  noise: float = 0.0, seed: int = 0) -> List[BenchRecord]:
    """Synthetic sparse-direct records whose times come from the model itself."""
    rng = np.random.default_rng(seed)
    out = []
    for name, spec in layers:
        cost = layer_cost(spec, batch)
        for x in grid:
            proj = project_times(cost, x, profile)
            t = proj.t_sparse * (1 + noise * rng.standard_normal()) if noise else proj.t_sparse
            out.append(BenchRecord(
                layer=name, geometry=",".join(map(str, spec.fields())), x=float(x),
                variant="sparse_direct", batch=batch, threads=1, reps=3, inner=1,
                median_time=t, effective_flops=cost.flops / t, speedup=proj.t_dense / t,
                model_t_sparse=proj.t_sparse, model_speedup=proj.speedup,
                model_effective_flops=proj.effective_flops,
            ))
    return out
