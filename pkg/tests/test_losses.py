"""Loss tests against direct float64 formula oracles and finite differences."""

import math

import numpy as np
import pytest

from shmrobust import autodiff as ad
from shmrobust import losses, nets
from shmrobust.losses import CircleParams, CombinedLossSpec, SimilarityPairs
from util_kinks import kink_margin, sim_kink_margin


def _normalized_features(rng, n, d):
    f = rng.normal(size=(n, d))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    return f.astype(np.float32)


# -- independent oracles; plain summation of the printed formulas in float64


def ce_direct(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    total = 0.0
    for row, lab in zip(logits, labels):
        e = np.exp(row - row.max())
        total += -math.log(e[lab] / e.sum())
    return total / len(labels)


def unified_direct(sim, labels, m, g):
    n = len(labels)
    per, cnt = 0.0, 0
    for i in range(n):
        sp = [float(sim[i, j]) for j in range(n) if j != i and labels[j] == labels[i]]
        sn = [float(sim[i, j]) for j in range(n) if labels[j] != labels[i]]
        if not sp or not sn:
            continue
        term_n = sum(math.exp(g * (s + m)) for s in sn)
        term_p = sum(math.exp(-g * s) for s in sp)
        per += math.log(1.0 + term_n * term_p)
        cnt += 1
    return per / cnt if cnt else 0.0


def circle_direct(sim, labels, m, g):
    n = len(labels)
    per, cnt = 0.0, 0
    for i in range(n):
        sp = [float(sim[i, j]) for j in range(n) if j != i and labels[j] == labels[i]]
        sn = [float(sim[i, j]) for j in range(n) if labels[j] != labels[i]]
        if not sp or not sn:
            continue
        term_n = sum(math.exp(g * max(0.0, s + m) * (s - m)) for s in sn)
        term_p = sum(math.exp(-g * max(0.0, (1.0 - m) - s) * (s - (1.0 - m))) for s in sp)
        per += math.log(1.0 + term_n * term_p)
        cnt += 1
    return per / cnt if cnt else 0.0


class TestCrossEntropy:
    def test_saturated_correct_class(self):
        logits = np.full((2, 4), -1e9, dtype=np.float32)
        logits[0, 1] = 0.0
        logits[1, 3] = 0.0
        loss = losses.cross_entropy(ad.tensor(logits), [1, 3]).item()
        assert loss == 0.0

    def test_uniform_logits(self):
        loss = losses.cross_entropy(ad.tensor(np.zeros((3, 4), np.float32)), [0, 1, 2]).item()
        assert math.isclose(loss, math.log(4.0), rel_tol=1e-6)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(3, 5)).astype(np.float32)
        labels = [4, 0, 2]
        got = losses.cross_entropy(ad.tensor(logits), labels).item()
        assert math.isclose(got, ce_direct(logits, labels), rel_tol=1e-6, abs_tol=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(losses.LossError, match="label"):
            losses.cross_entropy(ad.tensor(np.zeros((2, 3), np.float32)), [0, 3])


class TestPairSimilarities:
    def test_identical_same_label_rows(self):
        f = np.array([[1.0, 0.0], [1.0, 0.0]], np.float32)
        pairs = losses.pair_similarities(ad.tensor(f), [0, 0])
        assert pairs.s_pos(0).tolist() == [1.0]
        assert pairs.s_neg(0).size == 0
        assert pairs.pos_counts.tolist() == [1, 1]

    def test_orthogonal_cross_label(self):
        f = np.array([[1.0, 0.0], [0.0, 1.0]], np.float32)
        pairs = losses.pair_similarities(ad.tensor(f), [0, 1])
        assert pairs.s_neg(0).tolist() == [0.0]

    def test_counts_partition_batch(self):
        rng = np.random.default_rng(1)
        f = _normalized_features(rng, 7, 5)
        labels = rng.integers(0, 3, size=7)
        pairs = losses.pair_similarities(ad.tensor(f), labels)
        np.testing.assert_array_equal(pairs.pos_counts + pairs.neg_counts, np.full(7, 6))

    def test_matches_brute_force_dots_exactly(self):
        rng = np.random.default_rng(2)
        f = _normalized_features(rng, 4, 6)
        pairs = losses.pair_similarities(ad.tensor(f), [0, 0, 1, 1])
        for i in range(4):
            for j in range(4):
                want = np.float32(np.dot(f[i].astype(np.float64), f[j].astype(np.float64)))
                assert pairs.sim.data[i, j] == want

    def test_batch_too_small(self):
        with pytest.raises(losses.LossError):
            losses.pair_similarities(ad.tensor(np.ones((1, 3), np.float32)), [0])


class TestUnifiedLoss:
    def test_single_class_batch_is_zero(self):
        f = _normalized_features(np.random.default_rng(3), 4, 5)
        pairs = losses.pair_similarities(ad.tensor(f), [1, 1, 1, 1])
        assert losses.unified_loss(pairs, 0.2, 4.0).item() == 0.0

    def test_single_pair_analytic(self):
        sim = np.array([[1.0, 1.0, -1.0], [1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]], np.float32)
        pairs = SimilarityPairs.from_matrix(sim, [0, 0, 1])
        got = losses.unified_loss(pairs, margin=0.0, scale=1.0).item()
        assert math.isclose(got, math.log(1.0 + math.exp(-2.0)), rel_tol=1e-6)

    def test_matches_direct_oracle(self):
        for seed in range(30):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(3, 9))
            f = _normalized_features(rng, n, 6)
            labels = rng.integers(0, 3, size=n)
            pairs = losses.pair_similarities(ad.tensor(f), labels)
            got = losses.unified_loss(pairs, 0.25, 16.0).item()
            want = unified_direct(pairs.sim.data, labels, 0.25, 16.0)
            assert math.isclose(got, want, rel_tol=1e-5, abs_tol=1e-5), f"seed {seed}"


class TestCircleLoss:
    def test_analytic_plug_in(self):
        # two identical same-label pairs per class, orthogonal across classes:
        # s_p = 1 kills the positive weight, each negative contributes e^-2
        f = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], np.float32)
        pairs = losses.pair_similarities(ad.tensor(f), [0, 0, 1, 1])
        got = losses.circle_loss(pairs, CircleParams(margin=0.25, scale=32.0)).item()
        want = math.log(1.0 + 2.0 * math.exp(-2.0) * 1.0)
        assert math.isclose(got, want, rel_tol=1e-6)
        np.testing.assert_allclose(np.maximum(0.0, pairs.s_neg(0) + 0.25), 0.25)
        np.testing.assert_allclose(np.maximum(0.0, 0.75 - pairs.s_pos(0)), 0.0)

    def test_single_class_batch_is_zero(self):
        f = _normalized_features(np.random.default_rng(4), 5, 4)
        pairs = losses.pair_similarities(ad.tensor(f), [2] * 5)
        assert losses.circle_loss(pairs, CircleParams()).item() == 0.0

    def test_matches_direct_oracle(self):
        for seed in range(40):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(4, 9))
            f = _normalized_features(rng, n, 6)
            labels = rng.integers(0, 2, size=n)
            pairs = losses.pair_similarities(ad.tensor(f), labels)
            got = losses.circle_loss(pairs, CircleParams(0.25, 32.0)).item()
            want = circle_direct(pairs.sim.data, labels, 0.25, 32.0)
            assert math.isclose(got, want, rel_tol=1e-5, abs_tol=1e-5), f"seed {seed}"

    def test_gradient_matches_finite_differences(self):
        # gamma = 8 keeps the float32 forward noise well below the central
        # difference; at gamma = 32 the loss value sits at the precision
        # boundary of float32 FD itself (the value oracle covers gamma = 32)
        params = CircleParams(0.25, 8.0)
        labels = np.array([0, 0, 1, 1])
        checked = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            f = _normalized_features(rng, 4, 6)
            sim = f @ f.T
            if sim_kink_margin(sim.astype(np.float64), 0.25) < 1e-2:
                continue

            def fn(p):
                feats = nets.normalize_rows(p)
                return losses.circle_loss(losses.pair_similarities(feats, labels), params)

            err = ad.finite_diff_check(fn, ad.tensor(f), h=1e-3)
            assert err < 1e-3, f"seed {seed}: {err}"
            checked += 1
            if checked >= 10:
                return
        raise AssertionError(f"only {checked} kink-free instances")

    def test_batch_order_permutation_invariant(self):
        rng = np.random.default_rng(6)
        f = _normalized_features(rng, 6, 5)
        labels = rng.integers(0, 3, size=6)
        base = losses.circle_loss(losses.pair_similarities(ad.tensor(f), labels), CircleParams()).item()
        for _ in range(5):
            perm = rng.permutation(6)
            got = losses.circle_loss(
                losses.pair_similarities(ad.tensor(f[perm]), labels[perm]), CircleParams()
            ).item()
            assert math.isclose(got, base, abs_tol=1e-6)

    def test_alpha_truncation_nonnegative(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            sim = np.clip(rng.uniform(-1, 1, size=(5, 5)), -1, 1).astype(np.float32)
            m = float(rng.uniform(0.05, 0.5))
            alpha_n = np.maximum(0.0, sim + m)
            alpha_p = np.maximum(0.0, (1 - m) - sim)
            assert (alpha_n >= 0).all() and (alpha_p >= 0).all()

    def test_monotone_in_inter_class_similarity(self):
        # the specified weighting makes the inter-class logit g*(s+m)*(s-m),
        # a parabola with vertex at s=0: strict growth holds for s_n above 0
        # (integration note: below 0 the truncated weight shrinks faster than
        # the margin term grows, so the value dips; see decisions ledger)
        params = CircleParams(0.25, 8.0)
        rng = np.random.default_rng(7)
        labels = [0, 0, 1, 1]
        for _ in range(30):
            sim = rng.uniform(-0.9, 0.9, size=(4, 4)).astype(np.float32)
            sim = (sim + sim.T) / 2
            np.fill_diagonal(sim, 1.0)
            i, j = 0, 2  # inter-class entry
            sim[i, j] = rng.uniform(0.05, 0.85)
            base = losses.circle_loss(SimilarityPairs.from_matrix(sim, labels), params).item()
            bumped = sim.copy()
            bumped[i, j] += 0.05
            up = losses.circle_loss(SimilarityPairs.from_matrix(bumped, labels), params).item()
            assert up > base

    def test_monotone_in_intra_class_similarity(self):
        params = CircleParams(0.25, 8.0)
        rng = np.random.default_rng(8)
        labels = [0, 0, 1, 1]
        for _ in range(30):
            sim = rng.uniform(-0.9, 0.9, size=(4, 4)).astype(np.float32)
            sim = (sim + sim.T) / 2
            np.fill_diagonal(sim, 1.0)
            i, j = 0, 1  # intra-class entry
            sim[i, j] = rng.uniform(-0.85, 0.65)  # below O_p = 0.75 after the bump
            base = losses.circle_loss(SimilarityPairs.from_matrix(sim, labels), params).item()
            bumped = sim.copy()
            bumped[i, j] += 0.05
            down = losses.circle_loss(SimilarityPairs.from_matrix(bumped, labels), params).item()
            assert down < base


class TestCombinedLoss:
    def test_beta_zero_equals_cross_entropy(self):
        net = nets.build_mlp((10,), 3, seed=20)
        rng = np.random.default_rng(21)
        x = ad.tensor(rng.normal(size=(5, 10)).astype(np.float32))
        labels = rng.integers(0, 3, size=5)
        spec = CombinedLossSpec(beta=0.0)
        ce = losses.cross_entropy(nets.forward_logits(net, x), labels).item()
        assert losses.combined_loss(net, x, labels, spec).item() == ce

    def test_component_oracle_at_beta_from_training_protocol(self):
        # beta = 0.01 mirrors the deep-model training configuration
        net = nets.build_mlp((10,), 3, seed=22)
        rng = np.random.default_rng(23)
        x = ad.tensor(rng.normal(size=(6, 10)).astype(np.float32))
        labels = rng.integers(0, 3, size=6)
        spec = CombinedLossSpec(beta=0.01, tap_ids=("penultimate",))
        got = losses.combined_loss(net, x, labels, spec).item()
        ce = losses.cross_entropy(nets.forward_logits(net, x), labels).item()
        feats = nets.features_at(net, x, "penultimate")
        circ = losses.circle_loss(losses.pair_similarities(feats, labels), spec.circle).item()
        assert math.isclose(got, ce + 0.01 * circ, rel_tol=1e-5, abs_tol=1e-6)

    def test_degenerate_identical_batch_stays_finite(self):
        net = nets.build_mlp((10,), 3, seed=24)
        row = np.random.default_rng(25).normal(size=(1, 10)).astype(np.float32)
        x = ad.tensor(np.repeat(row, 4, axis=0), requires_grad=True)
        labels = [0, 0, 1, 1]  # identical inputs, split labels: s_p = s_n = 1
        tape = ad.Tape()
        with tape:
            loss = losses.combined_loss(net, x, labels, CombinedLossSpec(beta=0.01))
        assert np.isfinite(loss.item())
        ad.backward(tape, loss)
        assert np.isfinite(x.grad).all()

    def test_gradient_matches_finite_differences(self):
        labels = np.array([0, 1, 2])
        spec = CombinedLossSpec(beta=0.01, tap_ids=("penultimate",))
        checked = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            net = nets.build_mlp((8,), 3, hidden=6, seed=seed)
            x = rng.normal(size=(3, 8)).astype(np.float32)
            if kink_margin(net, x) < 1e-2:
                continue
            feats = nets.features_at(net, ad.tensor(x), "penultimate").numpy()
            if sim_kink_margin((feats @ feats.T).astype(np.float64), 0.25) < 1e-2:
                continue
            err = ad.finite_diff_check(
                lambda p: losses.combined_loss(net, p, labels, spec), ad.tensor(x), h=1e-3
            )
            assert err < 1e-3, f"seed {seed}: {err}"
            checked += 1
            if checked >= 10:
                return
        raise AssertionError(f"only {checked} kink-free instances")
