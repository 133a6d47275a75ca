import json
import time

import numpy as np
import pytest

from sparsecnn import bench, cli
from sparsecnn.nets import ALEXNET
from sparsecnn.perf_model import PRESETS, PlatformProfile, layer_cost, project_times, useful_sparsity_window
from sparsecnn.tensor import LayerSpec

SMALL = ("small", LayerSpec(8, 4, 3, 3, 10, 10, pad=1))
BDW = PRESETS["bdw"]


class TestWeights:
    @pytest.mark.parametrize("x", [1.0, 0.37, 0.05, 1e-6])
    def test_exact_nnz(self, x):
        spec = ALEXNET["conv3"]
        w = bench.make_sparse_weights(spec, x, seed=2)
        size = np.prod(spec.weight_shape)
        assert np.count_nonzero(w.data) == max(1, round(x * size))

    def test_magnitude_keeps_largest(self):
        spec = SMALL[1]
        full = bench.make_sparse_weights(spec, 1.0, seed=4).data.ravel()
        part = bench.make_sparse_weights(spec, 0.2, seed=4).data.ravel()
        kept = np.flatnonzero(part)
        top = np.argsort(-np.abs(full), kind="stable")[:kept.size]
        assert set(kept) == set(top)
        np.testing.assert_array_equal(part[kept], full[kept])

    def test_random_mode_differs(self):
        spec = SMALL[1]
        a = bench.make_sparse_weights(spec, 0.2, 4, "magnitude").data
        b = bench.make_sparse_weights(spec, 0.2, 4, "random").data
        assert np.count_nonzero(a) == np.count_nonzero(b)
        assert not np.array_equal(a != 0, b != 0)

    def test_rejects_bad_density(self):
        with pytest.raises(ValueError):
            bench.make_sparse_weights(SMALL[1], 0.0)


class TestSweepSpec:
    @pytest.mark.parametrize("kw", [dict(reps=2), dict(grid=(1.0, 1.5)), dict(grid=(0.0,)),
                                    dict(grid=()), dict(mode="blocky"), dict(batch=0)])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            bench.SweepSpec(layers=(SMALL,), **kw)

    def test_geometric_grid(self):
        g = bench.geometric_grid(1.0, 0.01, 20)
        assert len(g) == 20 and g[0] == 1.0 and g[-1] == pytest.approx(0.01)
        assert np.allclose(np.diff(np.log(g)), np.log(g[1] / g[0]))

    def test_parse_layer(self):
        assert bench.parse_layer("alexnet-conv5") == ("alexnet-conv5", ALEXNET["conv5"])
        name, spec = bench.parse_layer("8,4,3,3,10,10,1,1")
        assert spec == SMALL[1] and name == "8,4,3,3,10,10,1,1"
        with pytest.raises(ValueError):
            bench.parse_layer("vgg-conv1")


class TestTiming:
    def test_short_calls_get_inner_repeats(self):
        t, inner = bench.time_call(lambda: None, reps=3, warmup=0, min_time=1e-3)
        assert inner > 10 and t > 0

    def test_long_calls_run_once(self):
        t, inner = bench.time_call(lambda: time.sleep(0.004), reps=3, warmup=0, min_time=1e-3)
        assert inner == 1 and t >= 0.004


@pytest.fixture(scope="module")
def small_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep") / "s.csv"
    spec = bench.SweepSpec(layers=(SMALL, ("fc", LayerSpec.fully_connected(32, 64))),
                           grid=(1.0, 0.3, 0.05), reps=3, warmup=1, batch=2)
    return bench.run_sweep(spec, BDW, out=out), out


class TestRunSweep:
    def test_record_structure(self, small_sweep):
        records, _ = small_sweep
        conv = [r for r in records if r.layer == "small"]
        fc = [r for r in records if r.layer == "fc"]
        assert len(conv) == 3 * 4 and len(fc) == 3 * 2
        assert {r.variant for r in fc} == {"dense_direct", "fc_spmdm"}
        for r in records:
            assert r.median_time > 0 and r.batch == 2 and r.reps == 3
            assert r.effective_flops == pytest.approx(layer_cost(r.spec, 2).flops / r.median_time)
            if r.variant == "dense_direct":
                assert r.speedup == 1.0 and r.model_speedup == 1.0

    def test_model_overlay_uses_same_accounting(self, small_sweep):
        records, _ = small_sweep
        r = next(r for r in records if r.variant == "sparse_direct" and r.x < 0.1)
        proj = project_times(layer_cost(r.spec, r.batch), r.x, BDW)
        assert r.model_speedup == proj.speedup and r.model_t_sparse == proj.t_sparse

    def test_csv_round_trip(self, small_sweep):
        records, path = small_sweep
        back = bench.read_records(path)
        assert back == records
        assert path.read_text().splitlines()[0].split(",") == bench.COLUMNS

    def test_same_seed_same_structure(self, small_sweep):
        records, _ = small_sweep
        spec = bench.SweepSpec(layers=(SMALL, ("fc", LayerSpec.fully_connected(32, 64))),
                               grid=(1.0, 0.3, 0.05), reps=3, warmup=1, batch=2)
        again = bench.run_sweep(spec, BDW)
        key = lambda r: (r.layer, r.geometry, r.x, r.variant, r.batch, r.threads)
        assert [key(r) for r in again] == [key(r) for r in records]

    def test_without_profile(self):
        recs = bench.run_sweep(bench.SweepSpec(layers=(SMALL,), grid=(0.5,), reps=3,
                                               variants=("sparse_direct", "dense_direct")))
        assert all(r.model_speedup is None for r in recs)
        assert [r.variant for r in recs] == ["sparse_direct", "dense_direct"]
        assert recs[1].speedup == 1.0

    def test_validation_gate(self, monkeypatch):
        real = bench.conv_sparse_direct

        def broken(*a, **kw):
            out = real(*a, **kw)
            return type(out)(out.data + 1.0)

        monkeypatch.setattr(bench, "conv_sparse_direct", broken)
        with pytest.raises(bench.ValidationError):
            bench.run_sweep(bench.SweepSpec(layers=(SMALL,), grid=(0.5,), reps=3))


class TestFitAlpha:
    LAYERS = [("alexnet-conv2", ALEXNET["conv2"]), ("alexnet-conv5", ALEXNET["conv5"])]

    def test_closed_loop(self):
        prof = BDW.with_alpha(3.0)
        recs = bench.model_records(self.LAYERS, bench.geometric_grid(1.0, 0.01, 20), prof)
        assert bench.fit_alpha(recs, prof) == pytest.approx(3.0, abs=1e-9)

    def test_closed_loop_with_noise(self):
        prof = BDW.with_alpha(3.0)
        recs = bench.model_records(self.LAYERS, bench.geometric_grid(1.0, 0.01, 20), prof,
                                   noise=0.03, seed=1)
        assert abs(bench.fit_alpha(recs, prof) - 3.0) <= 0.1

    def test_underdetermined(self):
        recs = bench.model_records(self.LAYERS[:1], (0.5,), BDW)
        with pytest.raises(ValueError, match="at least 2"):
            bench.fit_alpha(recs, BDW)

    def test_bandwidth_bound_points_ignored(self):
        # x=0.001 is bandwidth-bound for conv5 on this profile; a wild time there changes nothing
        recs = bench.model_records(self.LAYERS[1:], (0.5, 0.2, 0.1, 0.001), BDW)
        recs[-1].median_time *= 100
        assert bench.fit_alpha(recs, BDW) == pytest.approx(3.0)

    def test_fitted_alpha_moves_upper_bound(self):
        prof = BDW.with_alpha(4.5)
        recs = bench.model_records(self.LAYERS, bench.geometric_grid(1.0, 0.02, 10), prof)
        alpha = bench.fit_alpha(recs, BDW)
        w = useful_sparsity_window(layer_cost(ALEXNET["conv5"]), BDW.with_alpha(alpha))
        assert w.x_upper_useful == pytest.approx(1 / alpha)
        assert alpha == pytest.approx(4.5)

    def test_measured_alpha(self, small_sweep):
        records, _ = small_sweep
        a = bench.measured_alpha(records)
        assert set(a) == {"small"} and a["small"] > 0


class TestCalibration:
    def test_flops_sustained(self):
        t0 = time.perf_counter()
        f = bench.calibrate_flops()
        assert time.perf_counter() - t0 >= 1.0
        assert f >= 1e9

    def test_bandwidth_floor(self):
        assert bench.calibrate_bandwidth(seconds=0.3) >= 1e9

    def test_profile_stable_and_valid(self):
        p = bench.calibrate(runs=3, seconds=0.3, bandwidth_elems=1 << 24)
        assert p.flops >= 1e9 and p.bandwidth >= 1e9
        assert isinstance(p, PlatformProfile)

    def test_unstable_raises(self, monkeypatch):
        vals = iter([1e10, 2e10, 1e10])
        monkeypatch.setattr(bench, "calibrate_flops", lambda seconds: next(vals))
        monkeypatch.setattr(bench, "calibrate_bandwidth", lambda seconds, n: 1e10)
        with pytest.raises(bench.CalibrationUnstable):
            bench.calibrate(runs=3)


class TestCli:
    def test_layer_expansion(self):
        assert cli.expand_layers(["alexnet-conv2..5"]) == [f"alexnet-conv{i}" for i in range(2, 6)]
        assert cli.expand_layers(["1,2,3,3,5,5"]) == ["1,2,3,3,5,5"]

    def test_grid_forms(self):
        assert len(cli.parse_grid("1.0:0.01:20")) == 20
        assert cli.parse_grid("1,0.5") == (1.0, 0.5)

    def test_project(self, capsys):
        assert cli.main(["project", "--profile", "bdw", "--layer", "alexnet-conv5", "--x", "0.09"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["class"] == "prunable_for_speed"
        assert out["projections"][0]["speedup"] == pytest.approx(1 / 0.27)

    def test_sweep_and_fit(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("THREADS", "1")
        csv_path = tmp_path / "s.csv"
        rc = cli.main(["sweep", "--layer", "8,4,3,3,10,10,1,1", "--grid", "1:0.1:3", "--reps", "3",
                       "--profile", "bdw", "--out", str(csv_path)])
        assert rc == 0 and len(bench.read_records(csv_path)) == 12
        assert all(r.threads == 1 for r in bench.read_records(csv_path))
        recs = bench.model_records(TestFitAlpha.LAYERS, (1.0, 0.5, 0.2), BDW)
        bench.write_records(tmp_path / "m.csv", recs)
        prof = tmp_path / "p.json"
        assert cli.main(["fit-alpha", "--records", str(tmp_path / "m.csv"), "--profile", "bdw",
                         "--out", str(prof)]) == 0
        assert json.loads(prof.read_text())["alpha"] == pytest.approx(3.0)
        assert "alpha = 3.000" in capsys.readouterr().out

    def test_fit_alpha_underdetermined_exit(self, tmp_path):
        bench.write_records(tmp_path / "m.csv", bench.model_records(TestFitAlpha.LAYERS[:1], (0.5,), BDW))
        assert cli.main(["fit-alpha", "--records", str(tmp_path / "m.csv"), "--profile", "bdw"]) == 1

    def test_validation_exit_code(self, monkeypatch):
        def fail(*a, **kw):
            raise bench.ValidationError("mismatch")
        monkeypatch.setattr(bench, "run_sweep", fail)
        assert cli.main(["sweep", "--layer", "alexnet-conv5", "--grid", "0.5", "--reps", "3"]) == 2

    def test_calibration_exit_code(self, monkeypatch):
        def fail(**kw):
            raise bench.CalibrationUnstable("noisy")
        monkeypatch.setattr(bench, "calibrate", fail)
        assert cli.main(["calibrate"]) == 3

    def test_calibrate_writes_profile(self, tmp_path):
        out = tmp_path / "p.json"
        assert cli.main(["calibrate", "--runs", "1", "--seconds", "0.2", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["flops"] > 1e9

    def test_gsl_demo(self, tmp_path, capsys):
        cfg = {"seed": 0, "n_samples": 256,
               "train": {"max_iterations": 400, "threshold_ramp": 200},
               "check_period": 50, "trajectory": str(tmp_path / "t.csv"),
               "checkpoint_dir": str(tmp_path / "ckpt")}
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        rc = cli.main(["gsl-demo", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "r.json")])
        assert rc == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert [l["id"] for l in report["layers"]] == ["conv1", "conv2", "fc"]
        assert (tmp_path / "t.csv").read_text().startswith("iteration,layer,density")
        assert (tmp_path / "ckpt" / "conv2.sckt").exists()
        assert "net projected speedup" in capsys.readouterr().out

    def test_bad_layer_exit(self, capsys):
        assert cli.main(["project", "--profile", "bdw", "--layer", "nope"]) == 1
        assert "unknown layer" in capsys.readouterr().err
