"""Guided Sparsity Learning controller.

The controller never touches weights.  It classifies layers with the
performance model, watches the density each layer reaches during training and
returns directives; the trainer (or a replayed trajectory) applies them.

Rules evaluated at every periodic check, for each ACTIVE layer with density x:

* ``x <= x_lower_useful``: pruning further cannot help (bandwidth-bound), so
  STOP_PRUNING and keep the current zero pattern.
* density stabilized and ``x >= x_upper_useful``: the layer will never beat
  dense execution, so RESTORE_DENSE.
* otherwise CONTINUE.
"""
from __future__ import annotations

import csv
import enum
import json
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from os import PathLike
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .perf_model import (
    LayerClass,
    PlatformProfile,
    SparsityWindow,
    classify_layer,
    layer_cost,
    project_times,
    useful_sparsity_window,
)
from .tensor import LayerSpec

__all__ = [
    "LayerStatus",
    "Action",
    "PruneDirective",
    "PruneLayerState",
    "GslConfig",
    "GslReport",
    "gsl_init",
    "gsl_step",
    "gsl_run",
    "ReplaySource",
    "read_trajectory",
    "write_trajectory",
]


class LayerStatus(enum.Enum):
    EXCLUDED = "excluded"
    ACTIVE = "active"
    STOPPED_SATURATED = "stopped_saturated"
    RESTORED_DENSE = "restored_dense"


class Action(enum.Enum):
    CONTINUE = "continue"
    STOP_PRUNING = "stop_pruning"
    RESTORE_DENSE = "restore_dense"


@dataclass(frozen=True)
class PruneDirective:
    layer: str
    action: Action
    iteration: int


@dataclass
class PruneLayerState:
    layer: str
    spec: LayerSpec
    layer_class: LayerClass
    window: SparsityWindow
    status: LayerStatus
    trajectory: List[Tuple[int, float]] = field(default_factory=list)
    dense_snapshot: Optional[np.ndarray] = None
    final_density: Optional[float] = None

    @property
    def density(self) -> float:
        if self.final_density is not None:
            return self.final_density
        return self.trajectory[-1][1] if self.trajectory else 1.0


@dataclass(frozen=True)
class GslConfig:
    profile: PlatformProfile
    check_period: int = 100
    stabilization_window: int = 3
    stabilization_epsilon: float = 0.01
    batch: int = 1
    max_iterations: int = 5000
    manual_exclude: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.check_period < 1 or self.stabilization_window < 1:
            raise ValueError("check_period and stabilization_window must be >= 1")
        if not self.stabilization_epsilon > 0:
            raise ValueError("stabilization_epsilon must be > 0")
        if self.max_iterations < 0 or self.batch < 1:
            raise ValueError("max_iterations must be >= 0 and batch >= 1")


# Allowed status changes; anything else is a controller bug.
TRANSITIONS = {
    LayerStatus.ACTIVE: {LayerStatus.STOPPED_SATURATED, LayerStatus.RESTORED_DENSE},
    LayerStatus.EXCLUDED: set(),
    LayerStatus.STOPPED_SATURATED: set(),
    LayerStatus.RESTORED_DENSE: set(),
}


def _as_items(layers) -> List[Tuple[str, LayerSpec]]:
    if isinstance(layers, Mapping):
        items = list(layers.items())
    else:
        items = [(f"layer{i}", s) if isinstance(s, LayerSpec) else tuple(s)
                 for i, s in enumerate(layers)]
    return items


def gsl_init(layers: Union[Mapping[str, LayerSpec], Sequence], profile: PlatformProfile,
             batch: int = 1, manual_exclude: Iterable[str] = ()) -> "OrderedDict[str, PruneLayerState]":
    """Classify every layer; those without speedup potential start EXCLUDED.

    ``manual_exclude`` covers layers the model would prune but which are known
    not to reach useful sparsity (e.g. a network's first layer).
    """
    items = _as_items(layers)
    if not items:
        raise ValueError("gsl_init needs at least one layer")
    manual = set(manual_exclude)
    unknown = manual - {k for k, _ in items}
    if unknown:
        raise KeyError(f"manual_exclude names unknown layers: {sorted(unknown)}")
    states = OrderedDict()
    for name, spec in items:
        cost = layer_cost(spec, batch)
        window = useful_sparsity_window(cost, profile)
        status = LayerStatus.ACTIVE
        if not window.has_speedup_potential or name in manual:
            status = LayerStatus.EXCLUDED
        states[name] = PruneLayerState(name, spec, classify_layer(spec, batch, profile), window, status)
    return states


def _stabilized(traj: List[Tuple[int, float]], window: int, eps: float) -> bool:
    if len(traj) < window:
        return False
    recent = [x for _, x in traj[-window:]]
    return max(recent) - min(recent) < eps


def _transition(state: PruneLayerState, new: LayerStatus) -> None:
    if new not in TRANSITIONS[state.status]:
        raise RuntimeError(f"illegal GSL transition {state.status} -> {new} for {state.layer}")
    state.status = new


def gsl_step(states: Mapping[str, PruneLayerState], iteration: int,
             observed: Mapping[str, float], config: GslConfig) -> List[PruneDirective]:
    """Record one periodic observation and return directives for ACTIVE layers."""
    unknown = set(observed) - set(states)
    if unknown:
        raise KeyError(f"observation for unknown layers: {sorted(unknown)}")
    directives = []
    for name, st in states.items():
        if st.status is not LayerStatus.ACTIVE or name not in observed:
            continue
        x = float(observed[name])
        if not 0 <= x <= 1:
            raise ValueError(f"density for {name} must lie in [0, 1], got {x}")
        st.trajectory.append((iteration, x))
        if x <= st.window.x_lower_useful:
            _transition(st, LayerStatus.STOPPED_SATURATED)
            st.final_density = x
            st.dense_snapshot = None
            action = Action.STOP_PRUNING
        elif (x >= st.window.x_upper_useful
              and _stabilized(st.trajectory, config.stabilization_window, config.stabilization_epsilon)):
            _transition(st, LayerStatus.RESTORED_DENSE)
            action = Action.RESTORE_DENSE
        else:
            action = Action.CONTINUE
        directives.append(PruneDirective(name, action, iteration))
    return directives


class TrajectorySource(Protocol):
    """Produces per-layer density observations at check iterations."""

    def layer_specs(self) -> Mapping[str, LayerSpec]: ...

    def start(self, states: Mapping[str, PruneLayerState]) -> None: ...

    def observations(self, config: GslConfig) -> Iterator[Tuple[int, Dict[str, float]]]: ...

    def apply(self, states: Mapping[str, PruneLayerState], directives: List[PruneDirective]) -> None: ...

    def restored_density(self, layer: str) -> float: ...


@dataclass
class GslReport:
    layers: List[dict]
    net_dense_time: float
    net_time: float
    iterations: int
    profile: PlatformProfile

    @property
    def net_speedup(self) -> float:
        return self.net_dense_time / self.net_time if self.net_time > 0 else 1.0

    def to_dict(self) -> dict:
        return {
            "profile": self.profile.to_dict(),
            "iterations": self.iterations,
            "layers": self.layers,
            "net": {
                "dense_time": self.net_dense_time,
                "projected_time": self.net_time,
                "projected_speedup": self.net_speedup,
                "layers_pruned": sum(
                    l["status"] in (LayerStatus.ACTIVE.value, LayerStatus.STOPPED_SATURATED.value)
                    for l in self.layers
                ),
            },
        }

    def to_json(self, path: Union[str, PathLike, None] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text


def layer_projection(state: PruneLayerState, config: GslConfig) -> Tuple[float, float, float]:
    """``(t_dense, t_final, speedup)`` of one layer at its final status and density.

    Excluded and restored layers run dense; pruned layers run the sparse kernel
    at the density they reached.
    """
    cost = layer_cost(state.spec, config.batch)
    if state.status in (LayerStatus.EXCLUDED, LayerStatus.RESTORED_DENSE):
        t_dense = cost.flops / config.profile.flops
        return t_dense, t_dense, 1.0
    # an all-zero layer still streams its activations
    x = max(state.density, np.finfo(float).tiny)
    proj = project_times(cost, x, config.profile)
    return proj.t_dense, proj.t_sparse, proj.speedup


def build_report(states: Mapping[str, PruneLayerState], config: GslConfig, iterations: int) -> GslReport:
    rows = []
    total_dense = total = 0.0
    for name, st in states.items():
        t_dense, t_final, speedup = layer_projection(st, config)
        total_dense += t_dense
        total += t_final
        rows.append({
            "id": name,
            "status": st.status.value,
            "class": st.layer_class.value,
            "final_density": st.density,
            "window": st.window.to_dict(),
            "projected_speedup": speedup,
        })
    return GslReport(rows, total_dense, total, iterations, config.profile)


def gsl_run(source: TrajectorySource, config: GslConfig) -> GslReport:
    """Drive the controller until max iterations or until no layer is still ACTIVE."""
    specs = source.layer_specs()
    if not specs:
        return GslReport([], 0.0, 0.0, 0, config.profile)
    states = gsl_init(specs, config.profile, config.batch, config.manual_exclude)
    source.start(states)
    last_iter = 0
    for iteration, observed in source.observations(config):
        if iteration > config.max_iterations:
            break
        last_iter = iteration
        directives = gsl_step(states, iteration, observed, config)
        for d in directives:
            if d.action is Action.RESTORE_DENSE:
                states[d.layer].final_density = source.restored_density(d.layer)
        source.apply(states, directives)
        if not any(s.status is LayerStatus.ACTIVE for s in states.values()):
            break
    for name, st in states.items():
        if st.status is LayerStatus.EXCLUDED and st.final_density is None:
            st.final_density = source.restored_density(name)
    return build_report(states, config, last_iter)


def read_trajectory(path: Union[str, PathLike]) -> List[Tuple[int, Dict[str, float]]]:
    """Parse ``iteration,layer,density`` rows into per-iteration observations."""
    grouped: Dict[int, Dict[str, float]] = defaultdict(dict)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [h.strip() for h in reader.fieldnames] != ["iteration", "layer", "density"]:
            raise ValueError(f"{path}: header must be 'iteration,layer,density'")
        for lineno, row in enumerate(reader, start=2):
            try:
                it = int(row["iteration"])
                x = float(row["density"])
                layer = row["layer"].strip()
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row}") from exc
            if not layer or not 0 <= x <= 1:
                raise ValueError(f"{path}:{lineno}: bad layer or density out of [0, 1]")
            grouped[it][layer] = x
    return sorted(grouped.items())


def write_trajectory(path: Union[str, PathLike], rows: Iterable[Tuple[int, str, float]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "layer", "density"])
        for it, layer, x in rows:
            w.writerow([it, layer, repr(float(x))])


class ReplaySource:
    """Feeds a recorded trajectory to the controller; directives are only logged."""

    def __init__(self, trajectory, layer_specs: Mapping[str, LayerSpec]):
        if isinstance(trajectory, (str, PathLike)):
            trajectory = read_trajectory(trajectory)
        self._obs = list(trajectory)
        self._specs = OrderedDict(layer_specs)
        self.applied: List[PruneDirective] = []

    def layer_specs(self):
        return self._specs

    def start(self, states):
        pass

    def observations(self, config: GslConfig):
        for it, obs in self._obs:
            yield it, {k: v for k, v in obs.items() if k in self._specs}

    def apply(self, states, directives):
        self.applied.extend(d for d in directives if d.action is not Action.CONTINUE)

    def restored_density(self, layer: str) -> float:
        return 1.0
