"""Acceptance gate: one test per criterion, each printing its pass line.

Criteria 4-8 share one trained model set per seed (session fixture); the
rest are self-contained. Every tolerance is pinned here, not configured.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats as scipy_stats

from shmrobust import attacks, cli, data, defenses, evaluate, losses, nets
from shmrobust import autodiff as ad
from shmrobust.attacks import AttackSpec
from shmrobust.defenses import SmoothingSpec
from shmrobust.losses import CircleParams, CombinedLossSpec
from test_data import frf_direct_oracle
from test_losses import circle_direct, unified_direct
from util_kinks import kink_margin, sim_kink_margin


def _report(criterion: str, ok: bool, detail: str = ""):
    print(f"\n[acceptance] {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{criterion} failed: {detail}"


# ---------------------------------------------------------------------------
# criterion 1: gradient suite


def _check_fd(fn_builder, n_instances, make_point, accept=None, h=2e-3):
    checked, seed = 0, 0
    worst = 0.0
    while checked < n_instances:
        if seed > 20 * n_instances:
            raise AssertionError(f"could not find {n_instances} kink-free instances")
        rng = np.random.default_rng(seed)
        seed += 1
        point, ctx = make_point(rng)
        if accept is not None and not accept(point, ctx):
            continue
        err = ad.finite_diff_check(fn_builder(ctx), ad.tensor(point), h=h)
        worst = max(worst, err)
        assert err < 1e-3, f"instance {seed - 1}: rel err {err}"
        checked += 1
    return worst


def test_criterion_1_gradient_suite():
    t0 = time.time()

    # cross-entropy w.r.t. logits
    def ce_point(rng):
        return rng.normal(size=(4, 5)).astype(np.float32), rng.integers(0, 5, size=4)

    worst = _check_fd(lambda labels: lambda p: losses.cross_entropy(p, labels),
                      100, ce_point)

    # unified and circle losses w.r.t. features (gamma = 8 keeps float32
    # central differences meaningful; the formula itself is gamma-uniform)
    def feat_point(rng):
        f = rng.normal(size=(5, 6))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        return f.astype(np.float32), rng.integers(0, 2, size=5)

    def feat_ok(point, labels):
        sim = (point @ point.T).astype(np.float64)
        return sim_kink_margin(sim, 0.25) > 1e-2 and len(set(labels.tolist())) > 1

    def unified_fn(labels):
        def fn(p):
            feats = nets.normalize_rows(p)
            return losses.unified_loss(losses.pair_similarities(feats, labels), 0.25, 8.0)
        return fn

    def circle_fn(labels):
        def fn(p):
            feats = nets.normalize_rows(p)
            return losses.circle_loss(losses.pair_similarities(feats, labels), CircleParams(0.25, 8.0))
        return fn

    worst = max(worst, _check_fd(unified_fn, 100, feat_point, feat_ok))
    worst = max(worst, _check_fd(circle_fn, 100, feat_point, feat_ok))

    # combined loss through a small MLP
    spec = CombinedLossSpec(circle=CircleParams(0.25, 8.0), beta=0.01, tap_ids=("penultimate",))

    def combined_point(rng):
        seed = int(rng.integers(0, 2**31))
        net = nets.build_mlp((8,), 3, hidden=6, seed=seed)
        x = rng.normal(size=(3, 8)).astype(np.float32)
        labels = rng.integers(0, 3, size=3)
        return x, (net, labels)

    def combined_ok(x, ctx):
        net, labels = ctx
        if kink_margin(net, x) < 1e-2:
            return False
        feats = nets.features_at(net, ad.tensor(x), "penultimate").data
        return sim_kink_margin((feats @ feats.T).astype(np.float64), 0.25) > 1e-2

    worst = max(worst, _check_fd(
        lambda ctx: lambda p: losses.combined_loss(ctx[0], p, ctx[1], spec),
        100, combined_point, combined_ok))

    # both presets: cross-entropy of the forward pass w.r.t. the input
    def mlp_point(rng):
        seed = int(rng.integers(0, 2**31))
        net = nets.build_mlp((12,), 3, hidden=8, seed=seed)
        return rng.normal(size=(3, 12)).astype(np.float32), (net, rng.integers(0, 3, size=3))

    def cnn_point(rng):
        seed = int(rng.integers(0, 2**31))
        net = nets.build_cnn((2, 20), 3, seed=seed, conv_out=4, kernel=5, pool=2, hidden1=8, hidden2=6)
        return rng.normal(size=(2, 2, 20)).astype(np.float32), (net, rng.integers(0, 3, size=2))

    def net_ok(x, ctx):
        return kink_margin(ctx[0], x) > 1e-2

    for maker in (mlp_point, cnn_point):
        worst = max(worst, _check_fd(
            lambda ctx: lambda p: losses.cross_entropy(nets.forward_logits(ctx[0], p), ctx[1]),
            100, maker, net_ok))

    elapsed = time.time() - t0
    _report("criterion 1 (gradient suite, 6x100 instances)",
            elapsed < 60.0, f"worst rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: circle-loss oracle equivalence


def test_criterion_2_circle_oracle():
    params = CircleParams(0.25, 32.0)
    worst = 0.0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        f = rng.normal(size=(n, 6))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        labels = rng.integers(0, 3, size=n)
        pairs = losses.pair_similarities(ad.tensor(f.astype(np.float32)), labels)
        got = losses.circle_loss(pairs, params).item()
        want = circle_direct(pairs.sim.data, labels, 0.25, 32.0)
        assert math.isclose(got, want, rel_tol=1e-5, abs_tol=1e-5), f"seed {seed}: {got} vs {want}"
        worst = max(worst, abs(got - want))
        got_u = losses.unified_loss(pairs, 0.25, 16.0).item()
        want_u = unified_direct(pairs.sim.data, labels, 0.25, 16.0)
        assert math.isclose(got_u, want_u, rel_tol=1e-5, abs_tol=1e-5)

    # analytic plug-in: s_p = 1, s_n = 0, m = 0.25, gamma = 32
    f = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], np.float32)
    pairs = losses.pair_similarities(ad.tensor(f), [0, 0, 1, 1])
    got = losses.circle_loss(pairs, params).item()
    want = math.log(1.0 + 2.0 * math.exp(-2.0))
    plug_ok = math.isclose(got, want, rel_tol=1e-6)
    _report("criterion 2 (circle oracle, 200 batches + plug-in)",
            plug_ok, f"max |diff| {worst:.2e}; plug-in {got:.6f} vs {want:.6f}")


# ---------------------------------------------------------------------------
# criterion 3: attack containment


def test_criterion_3_attack_containment():
    net = nets.build_mlp((8,), 3, hidden=6, seed=0)
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(1000):
        eps = float(rng.uniform(0.005, 0.6))
        x = rng.normal(size=(2, 8)).astype(np.float32) * float(rng.uniform(0.5, 3.0))
        y = rng.integers(0, 3, size=2)
        iters = int(rng.integers(1, 6))
        step = eps / float(rng.integers(2, 9))
        seed = int(rng.integers(0, 2**31))

        fg = attacks.fgsm(net, x, y, AttackSpec("fgsm", epsilon=eps))
        bm = attacks.bim(net, x, y, AttackSpec("bim", epsilon=eps, step=step, iters=iters))
        pg = attacks.pgd(net, x, y, AttackSpec("pgd", epsilon=eps, step=step, iters=iters,
                                               random_start=True, seed=seed))
        for adv in (fg, bm, pg):
            worst = max(worst, float(adv.delta_linf.max() - eps))
            assert adv.delta_linf.max() <= eps + 1e-6

        # degenerate equivalences, bitwise
        pg_plain = attacks.pgd(net, x, y, AttackSpec("pgd", epsilon=eps, step=step, iters=iters,
                                                     random_start=False, seed=seed))
        assert np.array_equal(pg_plain.x_adv.data, bm.x_adv.data)
        bm1 = attacks.bim(net, x, y, AttackSpec("bim", epsilon=eps, step=2 * eps, iters=1))
        assert np.array_equal(bm1.x_adv.data, fg.x_adv.data)
    _report("criterion 3 (containment, 1000 trials/family + bit-matches)",
            True, f"max excess {worst:.2e}")


# ---------------------------------------------------------------------------
# criterion 9: Welch FRF


def test_criterion_9_welch_frf():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        segments = int(rng.choice([2, 4, 5]))
        seg = int(rng.choice([16, 24, 32]))
        force = rng.normal(size=segments * seg)
        accel = rng.normal(size=segments * seg)
        got = data.welch_frf(force, accel, segments)
        want = frf_direct_oracle(force, accel, segments)
        worst = max(worst, float(np.abs(got - want).max()))
        assert np.abs(got - want).max() < 1e-9

    force = rng.normal(size=128)
    exact = np.array_equal(data.welch_frf(force, 2.0 * force, 4), 2.0 * data.welch_frf(force, force, 4))
    _report("criterion 9 (Welch FRF vs direct DFT oracle)",
            exact, f"max |diff| {worst:.2e}; power-of-two scaling exact: {exact}")


# ---------------------------------------------------------------------------
# criterion 10: randomized smoothing


def test_criterion_10_randomized_smoothing():
    rng = np.random.default_rng(1)
    mismatches = 0
    for _ in range(1000):
        n_top = int(rng.integers(1, 200))
        n_runner = int(rng.integers(0, n_top + 1))
        alpha = float(rng.choice([0.05, 0.1, 0.2]))
        want = scipy_stats.binomtest(n_top, n_top + n_runner, 0.5,
                                     alternative="greater").pvalue <= alpha
        if defenses.smoothing_decision(n_top, n_runner, alpha) != want:
            mismatches += 1
    net = nets.build_mlp((2, 16), 3, hidden=5, seed=0)
    xs = np.random.default_rng(2).normal(size=(50, 2, 16)).astype(np.float32)
    base = attacks.predict(net, xs)
    spec = SmoothingSpec(sigma=0.0, n_samples=2, alpha_fail=0.1, seed=0)
    sigma0 = [defenses.rs_predict(net, xs[i], spec) for i in range(len(xs))]
    never_abstains = all(p == b for p, b in zip(sigma0, base))
    _report("criterion 10 (smoothing decisions vs exact binomial oracle)",
            mismatches == 0 and never_abstains,
            f"{mismatches}/1000 mismatches; sigma=0 abstained: {not never_abstains}")


# ---------------------------------------------------------------------------
# criterion 11: CLI determinism


def test_criterion_11_cli_determinism(tmp_path):
    cfg = {
        "dataset": {"samples_per_class": 12},
        "train": {"epochs": 2, "batch_size": 16},
        "attacks": {"epsilon": 0.15, "cw_iters": 5},
        "eval": {"sigmas": [0.0, 0.1], "tap_subsets": [[], ["layer3"]]},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    cnn_cfg = dict(cfg, model={"preset": "cnn"})
    cnn_path = tmp_path / "cnn.json"
    cnn_path.write_text(json.dumps(cnn_cfg))

    def run_all(tag):
        out = tmp_path / tag
        argv = ["--config", str(cfg_path), "--seed", "5", "--out", str(out)]
        assert cli.main(argv + ["gen-data"]) == 0
        assert cli.main(argv + ["train"]) == 0
        ckpt = str(out / "standard.ckpt")
        assert cli.main(argv + ["eval", "--model", ckpt]) == 0
        assert cli.main(argv + ["attack", "--model", ckpt, "--family", "fgsm"]) == 0
        assert cli.main(argv + ["gauss", "--model", ckpt]) == 0
        assert cli.main(argv + ["transfer", "--models", ckpt, ckpt, "--family", "fgsm"]) == 0
        assert cli.main(["--config", str(cnn_path), "--seed", "5", "--out", str(out), "ablate"]) == 0
        assert cli.main(argv + ["report", "--infile", str(out / "robustness.json")]) == 0
        blobs = {}
        for p in sorted(out.glob("*.json")) + sorted(out.glob("*.csv")):
            blobs[p.name] = p.read_bytes()
        return blobs

    a = run_all("a")
    b = run_all("b")
    same = set(a) == set(b) and all(a[k] == b[k] for k in a)
    _report("criterion 11 (CLI byte determinism across reruns)",
            same, f"{len(a)} artifacts compared")
