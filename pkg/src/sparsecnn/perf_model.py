"""Roofline-style model of dense vs. sparse convolution time.

With ``C`` FLOPs, ``S_A`` activation bytes and ``S_W`` dense weight bytes::

    t_dense          = C / F
    t_sparse_compute = alpha * x * C / F
    t_sparse_bw      = (S_A + beta * x * S_W) / B
    speedup          = t_dense / max(t_sparse_compute, t_sparse_bw)

Everything here is expressed in non-zero density ``x`` (1 = dense).
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from os import PathLike
from typing import Dict, NamedTuple, Union

from .tensor import LayerSpec

__all__ = [
    "PlatformProfile",
    "PRESETS",
    "LayerCost",
    "Projection",
    "SparsityWindow",
    "LayerClass",
    "layer_cost",
    "project_times",
    "useful_sparsity_window",
    "classify_layer",
    "load_profile",
    "save_profile",
]

BYTES_PER_FLOAT = 4


@dataclass(frozen=True)
class PlatformProfile:
    """Achievable dense FLOP/s ``flops``, bandwidth in B/s and sparse overheads."""

    name: str
    flops: float
    bandwidth: float
    alpha: float = 3.0
    beta: float = 2.0

    def __post_init__(self):
        if not self.flops > 0 or not self.bandwidth > 0:
            raise ValueError("flops and bandwidth must be positive")
        if not self.alpha >= 1 or not self.beta >= 1:
            raise ValueError("alpha and beta must be >= 1")

    def with_alpha(self, alpha: float) -> "PlatformProfile":
        return PlatformProfile(self.name, self.flops, self.bandwidth, float(alpha), self.beta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PlatformProfile":
        try:
            return cls(
                name=str(d["name"]),
                flops=float(d["flops"]),
                bandwidth=float(d["bandwidth"]),
                alpha=float(d.get("alpha", 3.0)),
                beta=float(d.get("beta", 2.0)),
            )
        except KeyError as exc:
            raise ValueError(f"profile is missing field {exc}") from None


PROFILE_SCHEMA = {
    "type": "object",
    "required": ["name", "flops", "bandwidth", "alpha", "beta"],
    "properties": {
        "name": {"type": "string"},
        "flops": {"type": "number", "exclusiveMinimum": 0},
        "bandwidth": {"type": "number", "exclusiveMinimum": 0},
        "alpha": {"type": "number", "minimum": 1},
        "beta": {"type": "number", "minimum": 1},
    },
}

# SGEMM GFLOP/s and STREAM bandwidth of the three evaluated machines.
PRESETS: Dict[str, PlatformProfile] = {
    "atom": PlatformProfile("atom", 62e9, 15e9, alpha=1.2),
    "bdw": PlatformProfile("bdw", 2150e9, 122e9, alpha=3.0),
    "knl": PlatformProfile("knl", 4540e9, 480e9, alpha=3.0),
}


def load_profile(source: Union[str, PathLike]) -> PlatformProfile:
    """Load a profile JSON file, or return a preset when given its name."""
    if isinstance(source, str) and source.lower() in PRESETS:
        return PRESETS[source.lower()]
    with open(source) as f:
        return PlatformProfile.from_dict(json.load(f))


def save_profile(profile: PlatformProfile, path: Union[str, PathLike]) -> None:
    with open(path, "w") as f:
        json.dump(profile.to_dict(), f, indent=2)
        f.write("\n")


@dataclass(frozen=True)
class LayerCost:
    flops: float
    activation_bytes: float
    weight_bytes: float


def layer_cost(spec: LayerSpec, batch: int = 1, *, per_image_weights: bool = False,
               padded_input: bool = True, lowered: bool = False) -> LayerCost:
    """FLOPs (2 per multiply-add) and bytes moved by one layer over ``batch`` images.

    The input is counted at its padded size since that is the buffer the
    kernels stream.  ``lowered`` scales the input by the im2col replication
    factor ``C*R*S*H_out*W_out / (C*H_in*W_in)``.  Weights are read once per
    call unless ``per_image_weights`` is set.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    s = spec
    flops = 2.0 * s.N * s.C * s.R * s.S * s.H_out * s.W_out * batch
    in_elems = s.C * (s.H_pad * s.W_pad if padded_input else s.H_in * s.W_in)
    if lowered:
        in_elems *= (s.R * s.S * s.H_out * s.W_out) / (s.H_in * s.W_in)
    out_elems = s.N * s.H_out * s.W_out
    act = BYTES_PER_FLOAT * batch * (in_elems + out_elems)
    weights = BYTES_PER_FLOAT * s.N * s.C * s.R * s.S * (batch if per_image_weights else 1)
    return LayerCost(flops, float(act), float(weights))


class Projection(NamedTuple):
    t_dense: float
    t_sparse_compute: float
    t_sparse_bw: float
    t_sparse: float
    speedup: float
    effective_flops: float


def project_times(cost: LayerCost, x: float, p: PlatformProfile) -> Projection:
    if not 0 < x <= 1:
        raise ValueError(f"density must lie in (0, 1], got {x}")
    t_dense = cost.flops / p.flops
    t_comp = p.alpha * x * cost.flops / p.flops
    t_bw = (cost.activation_bytes + p.beta * x * cost.weight_bytes) / p.bandwidth
    t_sparse = max(t_comp, t_bw)
    return Projection(t_dense, t_comp, t_bw, t_sparse, t_dense / t_sparse, cost.flops / t_sparse)


@dataclass(frozen=True)
class SparsityWindow:
    """Density range where sparse execution pays off.

    ``x_upper_useful`` is the largest density with speedup >= 1 (``1/alpha``
    when the layer is still compute-bound there).  ``x_lower_useful`` is the
    compute/bandwidth crossover: pruning below it buys almost nothing more.
    Without speedup potential the window is empty and ``x_lower_useful`` is 0.
    """

    x_lower_useful: float
    x_upper_useful: float
    has_speedup_potential: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _crossover_density(cost: LayerCost, p: PlatformProfile):
    # x at which t_sparse_compute == t_sparse_bw; None if bandwidth-bound everywhere
    denom = p.alpha * cost.flops * p.bandwidth / p.flops - p.beta * cost.weight_bytes
    if denom <= 0:
        return None
    return cost.activation_bytes / denom


def _break_even_density(cost: LayerCost, p: PlatformProfile) -> float:
    # largest x in [0, 1] with t_sparse <= t_dense (0 when there is none)
    t_dense = cost.flops / p.flops
    x_bw = (t_dense * p.bandwidth - cost.activation_bytes) / (p.beta * cost.weight_bytes)
    return max(0.0, min(1.0 / p.alpha, x_bw, 1.0))


def useful_sparsity_window(cost: LayerCost, p: PlatformProfile) -> SparsityWindow:
    x_upper = _break_even_density(cost, p)
    x_cross = _crossover_density(cost, p)
    if x_cross is not None and x_cross < 1.0 / p.alpha:
        # compute-bound at 1/alpha, so the break-even point is exactly 1/alpha
        return SparsityWindow(x_cross, 1.0 / p.alpha, True)
    return SparsityWindow(0.0, x_upper, False)


class LayerClass(enum.Enum):
    PRUNABLE_FOR_SPEED = "prunable_for_speed"
    BANDWIDTH_BOUND_ALWAYS = "bandwidth_bound_always"
    NO_BENEFIT = "no_benefit"


def classify_layer(spec: LayerSpec, batch: int, p: PlatformProfile, **cost_kw) -> LayerClass:
    """PRUNABLE_FOR_SPEED if there is a compute-bound useful window.

    Otherwise BANDWIDTH_BOUND_ALWAYS when some extreme density would still
    beat dense (only in the bandwidth-bound regime), else NO_BENEFIT.
    """
    cost = layer_cost(spec, batch, **cost_kw)
    window = useful_sparsity_window(cost, p)
    if window.has_speedup_potential:
        return LayerClass.PRUNABLE_FOR_SPEED
    if window.x_upper_useful > 0:
        return LayerClass.BANDWIDTH_BOUND_ALWAYS
    return LayerClass.NO_BENEFIT
