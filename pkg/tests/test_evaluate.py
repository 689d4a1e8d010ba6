"""Report orchestration: consistency cross-checks and emission round trips."""

import json

import numpy as np
import pytest

from shmrobust import attacks, data, defenses, evaluate, nets
from shmrobust.attacks import AttackSpec
from shmrobust.defenses import TrainSpec
from shmrobust.losses import CombinedLossSpec


def _tiny_setup(seed=0, spc=30):
    ds = data.generate(data.default_synth_spec(seed=seed, samples_per_class=spc))
    train, val = data.split(ds, 0.7, seed=seed)
    train_n, stats = data.normalize(train)
    val_n = data.apply_normalizer(val, stats)
    net = nets.build_mlp(train_n.input_shape, ds.class_count, hidden=17, seed=seed)
    spec = TrainSpec(mode="standard", epochs=20, batch_size=32, learning_rate=0.01, seed=seed)
    net, _ = defenses.train(net, train_n, spec)
    return net, train_n, val_n


def _constant_net(class_count=4):
    net = nets.build_mlp((2, 128), class_count, hidden=4, seed=0)
    for p in net.parameters():
        p.data[...] = 0.0
    net.params[3][1].data[0] = 10.0  # always class 0
    return net


class TestRobustnessReport:
    def test_epsilon_zero_equals_clean(self):
        net, _, val = _tiny_setup()
        report = evaluate.evaluate_robustness(net, val, [AttackSpec("fgsm", epsilon=0.0)])
        assert report.rows[0].accuracy_pct == report.clean_accuracy_pct

    def test_clean_accuracy_matches_independent_count(self):
        net, _, val = _tiny_setup()
        report = evaluate.evaluate_robustness(net, val, [AttackSpec("fgsm", epsilon=0.0)])
        correct = 0
        for i in range(len(val)):
            logits = nets.forward_logits(net, __import__("shmrobust.autodiff", fromlist=["Tensor"]).Tensor(val.samples[i : i + 1]))
            correct += int(logits.data[0].argmax() == val.labels[i])
        assert report.clean_accuracy_pct == pytest.approx(100.0 * correct / len(val))

    def test_constant_model_near_chance(self):
        net = _constant_net()
        ds = data.generate(data.default_synth_spec(seed=1, samples_per_class=25))
        report = evaluate.evaluate_robustness(net, ds, [AttackSpec("fgsm", epsilon=0.1)])
        assert report.clean_accuracy_pct == 25.0
        assert report.rows[0].accuracy_pct == 25.0  # zero gradients: nothing moves

    def test_rows_carry_stats(self):
        net, _, val = _tiny_setup()
        report = evaluate.evaluate_robustness(net, val, [AttackSpec("fgsm", epsilon=0.15)],
                                              model_id="m", cfg_hash="h", seed=3)
        row = report.rows[0]
        assert row.sample_count == len(val)
        assert row.mean_delta_l2 > 0 and row.mean_snr_db is not None
        assert report.to_dict()["config_hash"] == "h"


class TestTransferMatrix:
    def test_single_model_matches_whitebox(self):
        net, _, val = _tiny_setup()
        spec = AttackSpec("fgsm", epsilon=0.2)
        matrix = evaluate.transfer_matrix([("m", net)], spec, val)
        report = evaluate.evaluate_robustness(net, val, [spec])
        assert matrix.accuracy_pct[0][0] == report.rows[0].accuracy_pct

    def test_diagonal_consistency_two_models(self):
        net_a, train, val = _tiny_setup(seed=0)
        net_b = nets.build_mlp(train.input_shape, train.class_count, hidden=32, seed=5)
        spec_t = TrainSpec(mode="standard", epochs=15, batch_size=32, learning_rate=0.01, seed=5)
        net_b, _ = defenses.train(net_b, train, spec_t)
        spec = AttackSpec("fgsm", epsilon=0.2)
        matrix = evaluate.transfer_matrix([("a", net_a), ("b", net_b)], spec, val)
        for i, (_, net) in enumerate([("a", net_a), ("b", net_b)]):
            report = evaluate.evaluate_robustness(net, val, [spec])
            assert matrix.accuracy_pct[i][i] == report.rows[0].accuracy_pct
        assert len(matrix.column_means()) == 2

    def test_incompatible_models_rejected(self):
        a = nets.build_mlp((2, 128), 4, seed=0)
        b = nets.build_mlp((2, 64), 4, seed=0)
        ds = data.generate(data.default_synth_spec(seed=2, samples_per_class=3))
        with pytest.raises(evaluate.EvalError, match="input shape"):
            evaluate.transfer_matrix([("a", a), ("b", b)], AttackSpec("fgsm", epsilon=0.1), ds)


class TestGaussianSweep:
    def test_sigma_zero_is_clean(self):
        net, _, val = _tiny_setup()
        rows = evaluate.gaussian_sweep(net, val, [0.0, 0.2], seed=1)
        assert rows[0]["accuracy_pct"] == evaluate.accuracy_pct(net, val.samples, val.labels)

    def test_deterministic(self):
        net, _, val = _tiny_setup()
        a = evaluate.gaussian_sweep(net, val, [0.1, 0.3], seed=2)
        b = evaluate.gaussian_sweep(net, val, [0.1, 0.3], seed=2)
        assert a == b


class TestCalibration:
    def test_calibration_converges_and_records_history(self):
        net, _, val = _tiny_setup(spc=40)
        cal = evaluate.calibrate_epsilon(net, val, seed=0)
        assert cal["converged"]
        assert cal["history"][-1]["pgd_accuracy"] < 0.30
        # every grid point except the last stayed at or above the target
        for h in cal["history"][:-1]:
            assert h["pgd_accuracy"] >= 0.30


class TestFeatureGeometry:
    def test_bounds_and_keys(self):
        net, _, val = _tiny_setup()
        geo = evaluate.feature_geometry(net, val)
        assert geo["tap"] == "penultimate"
        assert -1.0 <= geo["inter_class_mean"] <= 1.0
        assert -1.0 <= geo["intra_class_mean"] <= 1.0


class TestEmitReport:
    def test_json_round_trip_value_identical(self, tmp_path):
        net, _, val = _tiny_setup()
        report = evaluate.evaluate_robustness(net, val, [AttackSpec("fgsm", epsilon=0.1)],
                                              model_id="m", cfg_hash="abc", seed=1)
        path = tmp_path / "r.json"
        evaluate.emit_report(report, "json", path)
        assert json.loads(path.read_text()) == report.to_dict()

    def test_csv_row_count(self, tmp_path):
        net, _, val = _tiny_setup()
        specs = [AttackSpec("fgsm", epsilon=0.1), AttackSpec("bim", epsilon=0.1, step=0.02, iters=3)]
        report = evaluate.evaluate_robustness(net, val, specs)
        path = tmp_path / "r.csv"
        evaluate.emit_report(report, "csv", path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 1 + 1 + len(specs)  # header + clean + attack rows

    def test_csv_two_decimals(self, tmp_path):
        net, _, val = _tiny_setup()
        report = evaluate.evaluate_robustness(net, val, [AttackSpec("fgsm", epsilon=0.125)])
        path = tmp_path / "r.csv"
        evaluate.emit_report(report, "csv", path)
        acc_cell = path.read_text().strip().splitlines()[2].split(",")[3]
        assert len(acc_cell.split(".")[1]) == 2

    def test_identical_config_identical_hash(self):
        cfg = {"a": 1, "b": [1, 2]}
        assert evaluate.config_hash(cfg, 7) == evaluate.config_hash(json.loads(json.dumps(cfg)), 7)
        assert evaluate.config_hash(cfg, 7) != evaluate.config_hash(cfg, 8)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(evaluate.EvalError):
            evaluate.emit_report({"rows": []}, "xml", tmp_path / "x")


class TestAblation:
    def test_subset_rows_and_recommendation(self):
        ds = data.generate(data.default_synth_spec(seed=3, samples_per_class=10))
        train, val = data.split(ds, 0.7, seed=3)
        train_n, stats = data.normalize(train)
        val_n = data.apply_normalizer(val, stats)
        eps = 0.2
        base = evaluate.benchmark_train_spec("at_circle", eps, seed=3, epochs=2)
        subsets = [(), ("layer3",), ("layer1", "layer3")]
        rows = evaluate.ablate_layers(
            lambda: nets.build_cnn(train_n.input_shape, train_n.class_count, seed=3),
            train_n, val_n, subsets, base, eps)
        assert [r["taps"] for r in rows] == ["none", "layer3", "layer1+layer3"]
        assert [r["recommended"] for r in rows] == [False, True, False]
        for r in rows:
            assert set(r) == {"taps", "clean_pct", "fgsm_pct", "bim_pct", "recommended"}
