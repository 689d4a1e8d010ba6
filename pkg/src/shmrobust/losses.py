"""Loss functions: cross-entropy, unified pair loss, circle loss, combined objective.

Circle loss reweights every cosine similarity by its distance from a
per-type optimum (O_p = 1 - m for intra-class pairs, O_n = -m for
inter-class pairs) before rescaling by gamma:

    per anchor:  log[1 + sum_j exp(g * a_n_j * (s_n_j - m))
                        * sum_i exp(-g * a_p_i * (s_p_i - (1 - m)))]
    a_n_j = [s_n_j + m]+        a_p_i = [(1 - m) - s_p_i]+

evaluated in log-sum-exp form for stability. Gradients flow through the
weighting factors as written, so the analytic gradient is the exact
derivative of the formula. Anchors lacking intra- or inter-class partners
contribute zero; the rest are averaged (configurable to sum).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

_MASK_FILL = -1e9


class LossError(Exception):
    pass


@dataclass(frozen=True)
class CircleParams:
    """Margin m in (0,1) and scale gamma > 0; optima derive as O_n=-m, O_p=1-m."""

    margin: float = 0.25
    scale: float = 32.0

    def __post_init__(self):
        if not 0.0 < self.margin < 1.0:
            raise LossError(f"margin must be in (0,1), got {self.margin}")
        if self.scale <= 0.0:
            raise LossError(f"scale must be > 0, got {self.scale}")

    @property
    def optimum_neg(self) -> float:
        return -self.margin

    @property
    def optimum_pos(self) -> float:
        return 1.0 - self.margin

    @property
    def delta_neg(self) -> float:
        return self.margin

    @property
    def delta_pos(self) -> float:
        return 1.0 - self.margin


@dataclass(frozen=True)
class CombinedLossSpec:
    """Cross-entropy plus beta-weighted circle loss at the given taps."""

    circle: CircleParams = field(default_factory=CircleParams)
    beta: float = 0.0
    tap_ids: tuple[str, ...] = ("penultimate",)
    anchor_reduction: str = "mean"

    def __post_init__(self):
        if self.beta < 0.0:
            raise LossError(f"beta must be >= 0, got {self.beta}")
        if self.beta > 0.0 and not self.tap_ids:
            raise LossError("tap_ids must be non-empty when beta > 0")
        if self.anchor_reduction not in ("mean", "sum"):
            raise LossError(f"anchor_reduction must be mean|sum, got {self.anchor_reduction}")


class SimilarityPairs:
    """All anchor/other cosine similarities of a batch, self-pairs excluded.

    Wraps the full similarity matrix (a Tensor, so gradients can flow back
    into features) plus intra/inter-class masks per anchor.
    """

    def __init__(self, sim: ad.Tensor, labels):
        labels = np.asarray(labels, dtype=np.int64)
        n = labels.shape[0]
        if n < 2:
            raise LossError(f"need a batch of >= 2 samples, got {n}")
        if sim.shape != (n, n):
            raise LossError(f"similarity matrix {sim.shape} does not match {n} labels")
        eye = np.eye(n, dtype=bool)
        same = labels[:, None] == labels[None, :]
        self.sim = sim
        self.labels = labels
        self.pos_mask = same & ~eye
        self.neg_mask = ~same

    @classmethod
    def from_matrix(cls, matrix, labels) -> "SimilarityPairs":
        m = matrix if isinstance(matrix, ad.Tensor) else ad.tensor(matrix)
        return cls(m, labels)

    @property
    def batch_size(self) -> int:
        return self.labels.shape[0]

    @property
    def pos_counts(self) -> np.ndarray:
        """K per anchor."""
        return self.pos_mask.sum(axis=1)

    @property
    def neg_counts(self) -> np.ndarray:
        """L per anchor."""
        return self.neg_mask.sum(axis=1)

    def s_pos(self, anchor: int) -> np.ndarray:
        return self.sim.data[anchor][self.pos_mask[anchor]]

    def s_neg(self, anchor: int) -> np.ndarray:
        return self.sim.data[anchor][self.neg_mask[anchor]]


def pair_similarities(features: ad.Tensor, labels) -> SimilarityPairs:
    """Similarity structure of an L2-normalized feature batch (exact dot products)."""
    if features.data.ndim != 2:
        raise LossError(f"features must be 2-d, got {features.shape}")
    sim = ad.matmul(features, ad.transpose(features))
    return SimilarityPairs(sim, labels)


def _masked_lse(logits: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    """Row-wise log-sum-exp over masked entries; empty rows come out ~ -1e9."""
    fill = ad.tensor(np.where(mask, 0.0, _MASK_FILL).astype(np.float32))
    masked = ad.add(logits, fill)
    row_max = ad.max(masked, axis=1, keepdims=True)
    shifted = ad.exp(ad.sub(masked, row_max))
    # zero out the masked entries exactly so padding cannot leak into the sum
    kept = ad.mul(shifted, ad.tensor(mask.astype(np.float32)))
    total = ad.sum(kept, axis=1)
    return ad.add(ad.log(ad.clamp(total, 1e-30, None)), ad.reshape(row_max, (row_max.shape[0],)))


def _anchor_reduce(per_anchor: ad.Tensor, valid: np.ndarray, reduction: str) -> ad.Tensor:
    if not valid.any():
        return ad.tensor(0.0)
    picked = ad.mul(per_anchor, ad.tensor(valid.astype(np.float32)))
    total = ad.sum(picked)
    if reduction == "sum":
        return total
    return ad.div(total, float(valid.sum()))


def unified_loss(pairs: SimilarityPairs, margin: float, scale: float, reduction: str = "mean") -> ad.Tensor:
    """Pair loss log[1 + sum_j exp(g(s_n+m)) * sum_i exp(-g s_p)] per anchor."""
    if scale <= 0.0:
        raise LossError(f"scale must be > 0, got {scale}")
    logit_n = ad.mul(ad.add(pairs.sim, margin), scale)
    logit_p = ad.mul(pairs.sim, -scale)
    lse_n = _masked_lse(logit_n, pairs.neg_mask)
    lse_p = _masked_lse(logit_p, pairs.pos_mask)
    per_anchor = ad.softplus(ad.add(lse_n, lse_p))
    valid = (pairs.pos_counts >= 1) & (pairs.neg_counts >= 1)
    return _anchor_reduce(per_anchor, valid, reduction)


def circle_loss(pairs: SimilarityPairs, params: CircleParams, reduction: str = "mean") -> ad.Tensor:
    """Circle loss with truncated-to-zero weights; gradients flow through them."""
    g = params.scale
    alpha_n = ad.relu(ad.sub(pairs.sim, params.optimum_neg))
    alpha_p = ad.relu(ad.sub(ad.tensor(np.full(pairs.sim.shape, params.optimum_pos, dtype=np.float32)), pairs.sim))
    logit_n = ad.mul(ad.mul(alpha_n, ad.sub(pairs.sim, params.delta_neg)), g)
    logit_p = ad.mul(ad.mul(alpha_p, ad.sub(pairs.sim, params.delta_pos)), -g)
    lse_n = _masked_lse(logit_n, pairs.neg_mask)
    lse_p = _masked_lse(logit_p, pairs.pos_mask)
    per_anchor = ad.softplus(ad.add(lse_n, lse_p))
    valid = (pairs.pos_counts >= 1) & (pairs.neg_counts >= 1)
    return _anchor_reduce(per_anchor, valid, reduction)


def cross_entropy_from_logits(logits: ad.Tensor, labels) -> ad.Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise LossError(f"logits must be 2-d, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise LossError(f"labels shape {labels.shape} != ({n},)")
    if (labels < 0).any() or (labels >= c).any():
        raise LossError(f"label out of range [0, {c})")
    row_max = ad.max(logits, axis=1, keepdims=True)
    shifted = ad.sub(logits, row_max)
    lse = ad.log(ad.sum(ad.exp(shifted), axis=1))
    picked = ad.gather_rows(shifted, labels)
    return ad.mean(ad.sub(lse, picked))


cross_entropy = cross_entropy_from_logits


def soft_cross_entropy(logits: ad.Tensor, target_probs: np.ndarray) -> ad.Tensor:
    """Mean over the batch of -sum_c target[c] * log softmax(logits)[c]."""
    if logits.shape != tuple(np.shape(target_probs)):
        raise LossError(f"logits {logits.shape} vs targets {np.shape(target_probs)}")
    row_max = ad.max(logits, axis=1, keepdims=True)
    shifted = ad.sub(logits, row_max)
    lse = ad.log(ad.sum(ad.exp(shifted), axis=1, keepdims=True))
    log_probs = ad.sub(shifted, lse)
    picked = ad.sum(ad.mul(log_probs, ad.tensor(np.asarray(target_probs, dtype=np.float32))), axis=1)
    return ad.neg(ad.mean(picked))


def combined_loss(net, x_adv: ad.Tensor, labels, spec: CombinedLossSpec) -> ad.Tensor:
    """Cross-entropy plus beta * circle loss summed over the spec's taps."""
    from . import nets  # local import to avoid a cycle

    if spec.beta == 0.0:
        return cross_entropy_from_logits(nets.forward_logits(net, x_adv), labels)
    logits, feats = nets.forward_collect(net, x_adv, tuple(spec.tap_ids))
    total = cross_entropy_from_logits(logits, labels)
    for tap in spec.tap_ids:
        normalized = nets.normalize_rows(feats[tap])
        tap_loss = circle_loss(pair_similarities(normalized, labels), spec.circle, spec.anchor_reduction)
        total = ad.add(total, ad.mul(tap_loss, spec.beta))
    return total
