import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import model_speedup, window_by_grid
from sparsecnn.nets import ALEXNET, GOOGLENET
from sparsecnn.perf_model import (
    PRESETS,
    PROFILE_SCHEMA,
    LayerClass,
    LayerCost,
    PlatformProfile,
    classify_layer,
    layer_cost,
    load_profile,
    project_times,
    save_profile,
    useful_sparsity_window,
)
from sparsecnn.tensor import LayerSpec

BDW = PRESETS["bdw"]
ATOM = PRESETS["atom"]

# Hand products for AlexNet conv5 (256 x 384 x 3 x 3, 13 x 13 output, pad 1):
#   C   = 2*256*384*9*13*13
#   S_A = 4*(384*15*15 + 256*13*13) padded, 4*(384*13*13 + 256*13*13) unpadded
#   S_W = 4*256*384*9
CONV5_FLOPS = 299_040_768
CONV5_SA_PADDED = 518_656
CONV5_SA_UNPADDED = 432_640
CONV5_SW = 3_538_944
# S_A / (alpha*C*B/F - beta*S_W) with those numbers
CONV5_XLOW_BDW = 0.011833737667419176
CONV5_XLOW_ATOM = 0.006504306516609667


def random_cost_profile(rng):
    cost = LayerCost(10 ** rng.uniform(6, 10), 10 ** rng.uniform(4, 8), 10 ** rng.uniform(3, 8))
    prof = PlatformProfile("r", 10 ** rng.uniform(10, 13), 10 ** rng.uniform(9, 12),
                           rng.uniform(1, 8), rng.uniform(1, 3))
    return cost, prof


class TestPlatformProfile:
    def test_presets_match_published_table(self):
        assert (ATOM.flops, ATOM.bandwidth) == (62e9, 15e9)
        assert (BDW.flops, BDW.bandwidth) == (2150e9, 122e9)
        assert (PRESETS["knl"].flops, PRESETS["knl"].bandwidth) == (4540e9, 480e9)

    @pytest.mark.parametrize("kw", [dict(flops=0), dict(bandwidth=-1), dict(alpha=0.5), dict(beta=0.9)])
    def test_rejects_invalid(self, kw):
        base = dict(name="x", flops=1e9, bandwidth=1e9)
        with pytest.raises(ValueError):
            PlatformProfile(**{**base, **kw})

    def test_json_round_trip_matches_schema(self, tmp_path):
        p = PlatformProfile("t", 1.5e11, 2e10, 2.5, 2.0)
        save_profile(p, tmp_path / "p.json")
        raw = json.loads((tmp_path / "p.json").read_text())
        assert set(PROFILE_SCHEMA["required"]) <= set(raw)
        for key, rule in PROFILE_SCHEMA["properties"].items():
            assert isinstance(raw[key], str if rule["type"] == "string" else (int, float))
        assert load_profile(tmp_path / "p.json") == p

    def test_load_preset_by_name(self):
        assert load_profile("BDW") is BDW

    def test_missing_field(self, tmp_path):
        (tmp_path / "p.json").write_text('{"name": "x", "flops": 1e9}')
        with pytest.raises(ValueError, match="bandwidth"):
            load_profile(tmp_path / "p.json")


class TestLayerCost:
    def test_unit_layer(self):
        c = layer_cost(LayerSpec(1, 1, 1, 1, 1, 1), 1)
        assert (c.flops, c.activation_bytes, c.weight_bytes) == (2, 8, 4)

    def test_alexnet_conv5(self):
        c = layer_cost(ALEXNET["conv5"])
        assert c.flops == CONV5_FLOPS
        assert c.activation_bytes == CONV5_SA_PADDED
        assert c.weight_bytes == CONV5_SW
        assert layer_cost(ALEXNET["conv5"], padded_input=False).activation_bytes == CONV5_SA_UNPADDED

    @given(st.sampled_from(list(ALEXNET.values()) + list(GOOGLENET.values())), st.integers(1, 64))
    def test_batch_scaling(self, spec, b):
        one, many = layer_cost(spec, 1), layer_cost(spec, b)
        assert many.flops == b * one.flops
        assert many.activation_bytes == b * one.activation_bytes
        assert many.weight_bytes == one.weight_bytes
        assert layer_cost(spec, b, per_image_weights=True).weight_bytes == b * one.weight_bytes

    def test_lowered_replication(self):
        spec = ALEXNET["conv3"]
        direct = layer_cost(spec, padded_input=False)
        lowered = layer_cost(spec, padded_input=False, lowered=True)
        out_bytes = 4 * spec.N * spec.H_out * spec.W_out
        assert lowered.activation_bytes - out_bytes == pytest.approx(
            4 * spec.C * spec.R * spec.S * spec.H_out * spec.W_out)
        assert lowered.activation_bytes > direct.activation_bytes

    def test_rejects_zero_batch(self):
        with pytest.raises(ValueError):
            layer_cost(ALEXNET["conv5"], 0)


class TestProjectTimes:
    def test_compute_bound_speedup(self):
        p = project_times(layer_cost(ALEXNET["conv5"]), 0.09, BDW)
        assert p.t_sparse_compute > p.t_sparse_bw
        assert p.speedup == pytest.approx(1 / (3 * 0.09), rel=1e-12)
        assert round(p.speedup, 2) == 3.70

    def test_break_even_at_inverse_alpha(self):
        p = project_times(layer_cost(ALEXNET["conv5"]), 1 / 3, BDW)
        assert p.speedup == pytest.approx(1.0, rel=1e-12)

    @pytest.mark.parametrize("x", [0.0, -0.1, 1.01])
    def test_rejects_density_out_of_range(self, x):
        with pytest.raises(ValueError):
            project_times(layer_cost(ALEXNET["conv5"]), x, BDW)

    def test_matches_written_out_formula(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            cost, prof = random_cost_profile(rng)
            x = rng.uniform(1e-3, 1)
            got = project_times(cost, x, prof).speedup
            ref = model_speedup(x, cost.flops, cost.activation_bytes, cost.weight_bytes,
                                prof.flops, prof.bandwidth, prof.alpha, prof.beta)
            assert got == pytest.approx(ref, rel=1e-12)

    @given(st.integers(0, 2 ** 32 - 1))
    def test_time_monotone_in_density(self, seed):
        rng = np.random.default_rng(seed)
        cost, prof = random_cost_profile(rng)
        xs = np.sort(rng.uniform(1e-4, 1, 20))
        t = [project_times(cost, x, prof).t_sparse for x in xs]
        assert all(a <= b for a, b in zip(t, t[1:]))

    def test_effective_flops(self):
        cost = layer_cost(ALEXNET["conv2"])
        p = project_times(cost, 0.2, BDW)
        assert p.effective_flops == pytest.approx(cost.flops / p.t_sparse)


class TestUsefulWindow:
    def test_conv5_bdw(self):
        w = useful_sparsity_window(layer_cost(ALEXNET["conv5"]), BDW)
        assert w.has_speedup_potential
        assert w.x_lower_useful == pytest.approx(CONV5_XLOW_BDW, rel=1e-12)
        assert w.x_upper_useful == pytest.approx(1 / 3, rel=1e-12)

    def test_conv5_atom(self):
        w = useful_sparsity_window(layer_cost(ALEXNET["conv5"]), ATOM)
        assert w.x_lower_useful == pytest.approx(CONV5_XLOW_ATOM, rel=1e-12)
        assert w.x_upper_useful == pytest.approx(1 / 1.2)

    def test_atom_bound_below_xeon_bound(self):
        cost = layer_cost(ALEXNET["conv5"])
        assert useful_sparsity_window(cost, ATOM).x_lower_useful < useful_sparsity_window(cost, BDW).x_lower_useful

    def test_matches_grid_oracle(self):
        rng = np.random.default_rng(1234)
        for _ in range(300):
            cost, prof = random_cost_profile(rng)
            w = useful_sparsity_window(cost, prof)
            lo, hi, step = window_by_grid(cost.flops, cost.activation_bytes, cost.weight_bytes,
                                          prof.flops, prof.bandwidth, prof.alpha, prof.beta)
            assert abs(w.x_upper_useful - hi) <= step
            if w.has_speedup_potential:
                assert lo is not None and abs(w.x_lower_useful - lo) <= step
            else:
                assert w.x_lower_useful == 0.0
                assert lo is None or lo >= hi - step

    def test_infinite_bandwidth(self):
        prof = PlatformProfile("inf", 1e12, 1e30, alpha=3.0)
        for spec in list(ALEXNET.values()) + list(GOOGLENET.values()):
            w = useful_sparsity_window(layer_cost(spec), prof)
            assert w.has_speedup_potential and w.x_lower_useful < 1e-10


class TestClassify:
    def test_conv5_prunable(self):
        assert classify_layer(ALEXNET["conv5"], 1, BDW) is LayerClass.PRUNABLE_FOR_SPEED

    def test_inception_reduce_not_prunable(self):
        spec = GOOGLENET["inception_4a/5x5_reduce"]
        assert (spec.N, spec.C, spec.R, spec.H_in) == (16, 480, 1, 14)
        assert classify_layer(spec, 1, BDW) in (LayerClass.BANDWIDTH_BOUND_ALWAYS, LayerClass.NO_BENEFIT)
        small = LayerSpec(16, 192, 1, 1, 14, 14)
        assert classify_layer(small, 1, BDW) is not LayerClass.PRUNABLE_FOR_SPEED

    def test_fc_layers_bandwidth_bound(self):
        for name in ("fc6", "fc7", "fc8"):
            assert classify_layer(ALEXNET[name], 1, BDW) is LayerClass.BANDWIDTH_BOUND_ALWAYS

    def test_no_benefit_when_activations_dominate(self):
        # one output channel over a huge input: S_A/B alone exceeds C/F
        spec = LayerSpec(1, 64, 1, 1, 64, 64)
        assert classify_layer(spec, 1, BDW) is LayerClass.NO_BENEFIT

    def test_infinite_bandwidth_everything_prunable(self):
        prof = PlatformProfile("inf", 1e12, 1e30, alpha=3.0)
        for spec in list(ALEXNET.values()) + list(GOOGLENET.values()):
            assert classify_layer(spec, 1, prof) is LayerClass.PRUNABLE_FOR_SPEED

    def test_batching_helps_weight_bound_layers(self):
        # amortizing weights over a batch raises arithmetic intensity
        spec = ALEXNET["fc6"]
        w1 = useful_sparsity_window(layer_cost(spec, 1), BDW)
        w256 = useful_sparsity_window(layer_cost(spec, 256), BDW)
        assert not w1.has_speedup_potential and w256.has_speedup_potential
        assert math.isclose(w256.x_upper_useful, 1 / 3)
