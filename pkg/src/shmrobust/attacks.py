"""White-box adversarial example generators and perturbation measurement.

FGSM, BIM, and PGD are sign-gradient attacks constrained to an L-infinity
ball of radius epsilon (per-step order: gradient step, data clamp, ball
projection). C&W-L2 minimizes ||delta||^2 + c * hinge(margin, -k) by plain
gradient descent on delta and keeps the smallest successful perturbation.
Gaussian perturbation and SNR measurement support the noise baselines.

sign(0) is 0 throughout, so coordinates with an exactly zero gradient stay
untouched. Signals are not box-bounded by default; pass clamp_range to
enforce physical limits.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import losses, nets

FAMILIES = ("fgsm", "bim", "pgd", "cw_l2", "gaussian")


class AttackError(Exception):
    pass


@dataclass(frozen=True)
class AttackSpec:
    """Attack family, norm budget, and iteration schedule."""

    family: str
    epsilon: float = 0.0
    step: float = 0.0
    iters: int = 1
    random_start: bool = False
    cw_c: float = 1e-4
    cw_k: float = 0.0
    cw_iters: int = 100
    cw_lr: float = 0.01
    cw_target: int | None = None
    clamp_range: tuple[float, float] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise AttackError(f"unknown attack family {self.family!r} (expected one of {FAMILIES})")
        if self.epsilon < 0:
            raise AttackError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.family in ("bim", "pgd") and self.step <= 0:
            raise AttackError(f"{self.family}: step must be > 0, got {self.step}")
        if self.family in ("bim", "pgd") and self.iters < 1:
            raise AttackError(f"{self.family}: iters must be >= 1, got {self.iters}")
        if self.family == "cw_l2" and (self.cw_c <= 0 or self.cw_k < 0 or self.cw_iters < 1):
            raise AttackError(f"cw_l2: need cw_c > 0, cw_k >= 0, cw_iters >= 1")
        if self.clamp_range is not None and self.clamp_range[0] >= self.clamp_range[1]:
            raise AttackError(f"clamp_range lo >= hi: {self.clamp_range}")


@dataclass
class AdvBatch:
    """Adversarial batch with per-sample perturbation statistics."""

    x_adv: ad.Tensor
    delta_linf: np.ndarray
    delta_l2: np.ndarray
    snr_db: np.ndarray
    success: np.ndarray  # predicted label != true label

    def __len__(self):
        return self.x_adv.shape[0]


def _as_array(x) -> np.ndarray:
    arr = x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float32)
    return np.ascontiguousarray(arr, dtype=np.float32)


def _ce_grad(net: nets.Network, x_np: np.ndarray, labels) -> np.ndarray:
    """Gradient of the cross-entropy loss w.r.t. the input batch."""
    x = ad.Tensor(x_np, requires_grad=True)
    tape = ad.Tape()
    with tape:
        loss = losses.cross_entropy(nets.forward_logits(net, x), labels)
    ad.backward(tape, loss)
    if not np.isfinite(x.grad).all():
        raise ad.NonFiniteError("attack: non-finite loss gradient")
    return x.grad


def snr_db(x, x_adv) -> np.ndarray:
    """Per-sample 10*log10(||x||^2 / ||delta||^2); +inf where delta == 0."""
    x, x_adv = _as_array(x), _as_array(x_adv)
    if x.shape != x_adv.shape:
        raise AttackError(f"snr_db: shapes {x.shape} and {x_adv.shape} differ")
    n = x.shape[0]
    sig = (x.reshape(n, -1).astype(np.float64) ** 2).sum(axis=1)
    if (sig == 0.0).any():
        raise AttackError("snr_db: zero-signal input")
    noise = ((x_adv - x).reshape(n, -1).astype(np.float64) ** 2).sum(axis=1)
    out = np.full(n, np.inf)
    nz = noise > 0.0
    out[nz] = 10.0 * np.log10(sig[nz] / noise[nz])
    return out


def _finish(net, x: np.ndarray, x_adv: np.ndarray, labels) -> AdvBatch:
    n = x.shape[0]
    delta = (x_adv - x).reshape(n, -1).astype(np.float64)
    preds = predict(net, x_adv)
    return AdvBatch(
        x_adv=ad.Tensor(x_adv),
        delta_linf=np.abs(delta).max(axis=1),
        delta_l2=np.linalg.norm(delta, axis=1),
        snr_db=snr_db(x, x_adv),
        success=preds != np.asarray(labels),
    )


def predict(net: nets.Network, x) -> np.ndarray:
    logits = nets.forward_logits(net, ad.Tensor(_as_array(x)))
    return logits.data.argmax(axis=1)


def _clamp_data(x_adv: np.ndarray, spec: AttackSpec) -> np.ndarray:
    if spec.clamp_range is not None:
        lo, hi = spec.clamp_range
        return np.clip(x_adv, np.float32(lo), np.float32(hi))
    return x_adv


def fgsm(net, x, labels, spec: AttackSpec) -> AdvBatch:
    """Single step of size epsilon along the loss-gradient sign."""
    if spec.family != "fgsm":
        raise AttackError(f"fgsm called with family {spec.family!r}")
    x = _as_array(x)
    grad = _ce_grad(net, x, labels)
    x_adv = _clamp_data(x + np.float32(spec.epsilon) * np.sign(grad), spec)
    return _finish(net, x, x_adv, labels)


def _iterated_sign(net, x: np.ndarray, labels, spec: AttackSpec, x0: np.ndarray) -> np.ndarray:
    lo = x - np.float32(spec.epsilon)
    hi = x + np.float32(spec.epsilon)
    x_adv = x0
    for _ in range(spec.iters):
        grad = _ce_grad(net, x_adv, labels)
        x_adv = x_adv + np.float32(spec.step) * np.sign(grad)
        x_adv = _clamp_data(x_adv, spec)
        x_adv = np.clip(x_adv, lo, hi)
    return x_adv


def bim(net, x, labels, spec: AttackSpec) -> AdvBatch:
    """FGSM applied iteratively with an epsilon-ball projection each step."""
    x = _as_array(x)
    return _finish(net, x, _iterated_sign(net, x, labels, spec, x.copy()), labels)


def pgd(net, x, labels, spec: AttackSpec) -> AdvBatch:
    """BIM from a uniform random start inside the epsilon ball (seeded)."""
    x = _as_array(x)
    if spec.random_start:
        rng = np.random.default_rng(spec.seed)
        init = rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape).astype(np.float32)
        x0 = np.clip(_clamp_data(x + init, spec), x - np.float32(spec.epsilon), x + np.float32(spec.epsilon))
    else:
        x0 = x.copy()
    return _finish(net, x, _iterated_sign(net, x, labels, spec, x0), labels)


def _cw_hinge(logits: ad.Tensor, labels: np.ndarray, k: float, target: int | None) -> ad.Tensor:
    n, c = logits.shape
    if target is None:
        exclude = labels
        picked = ad.gather_rows(logits, labels)
    else:
        exclude = np.full(n, target, dtype=np.int64)
        picked = ad.gather_rows(logits, exclude)
    mask = np.zeros((n, c), dtype=np.float32)
    mask[np.arange(n), exclude] = -1e9
    best_other = ad.max(ad.add(logits, ad.tensor(mask)), axis=1)
    margin = ad.sub(picked, best_other) if target is None else ad.sub(best_other, picked)
    return ad.clamp(margin, -float(k), None)


def cw_l2(net, x, labels, spec: AttackSpec) -> AdvBatch:
    """C&W-L2: gradient descent on delta, keeping the smallest successful delta."""
    if spec.family != "cw_l2":
        raise AttackError(f"cw_l2 called with family {spec.family!r}")
    x = _as_array(x)
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    delta = np.zeros_like(x)
    best_delta = np.zeros_like(x)
    best_l2 = np.full(n, np.inf)

    for _ in range(spec.cw_iters):
        dvar = ad.Tensor(delta, requires_grad=True)
        tape = ad.Tape()
        with tape:
            x_adv = ad.add(ad.tensor(x), dvar)
            if spec.clamp_range is not None:
                x_adv = ad.clamp(x_adv, *spec.clamp_range)
            logits = nets.forward_logits(net, x_adv)
            flat = ad.reshape(dvar, (n, -1))
            l2_sq = ad.sum(ad.mul(flat, flat), axis=1)
            hinge = _cw_hinge(logits, labels, spec.cw_k, spec.cw_target)
            obj = ad.sum(ad.add(l2_sq, ad.mul(hinge, spec.cw_c)))
        if not np.isfinite(obj.item()):
            raise AttackError("cw_l2: objective became non-finite")
        ad.backward(tape, obj)

        x_try = _clamp_data(x + delta, spec)
        preds = predict(net, x_try)
        succ = (preds != labels) if spec.cw_target is None else (preds == spec.cw_target)
        l2_now = np.linalg.norm((x_try - x).reshape(n, -1).astype(np.float64), axis=1)
        better = succ & (l2_now < best_l2)
        best_l2[better] = l2_now[better]
        best_delta[better] = (x_try - x)[better]

        delta = delta - np.float32(spec.cw_lr) * dvar.grad

    # final iterate check
    x_try = _clamp_data(x + delta, spec)
    preds = predict(net, x_try)
    succ = (preds != labels) if spec.cw_target is None else (preds == spec.cw_target)
    l2_now = np.linalg.norm((x_try - x).reshape(n, -1).astype(np.float64), axis=1)
    better = succ & (l2_now < best_l2)
    best_l2[better] = l2_now[better]
    best_delta[better] = (x_try - x)[better]

    # samples never misclassified keep the final delta
    never = ~np.isfinite(best_l2)
    best_delta[never] = (x_try - x)[never]
    return _finish(net, x, (x + best_delta).astype(np.float32), labels)


def gaussian_perturb(x, sigma: float, seed: int) -> np.ndarray:
    """x + iid N(0, sigma^2) noise, deterministic per seed."""
    if sigma < 0:
        raise AttackError(f"gaussian_perturb: sigma must be >= 0, got {sigma}")
    x = _as_array(x)
    if sigma == 0.0:
        return x.copy()
    rng = np.random.default_rng(seed)
    return (x + rng.normal(0.0, sigma, size=x.shape)).astype(np.float32)


def gaussian(net, x, labels, spec: AttackSpec) -> AdvBatch:
    """Gaussian noise baseline; spec.epsilon is the noise std."""
    x = _as_array(x)
    return _finish(net, x, gaussian_perturb(x, spec.epsilon, spec.seed), labels)


_DISPATCH = {"fgsm": fgsm, "bim": bim, "pgd": pgd, "cw_l2": cw_l2, "gaussian": gaussian}


def run_attack(net, x, labels, spec: AttackSpec) -> AdvBatch:
    return _DISPATCH[spec.family](net, x, labels, spec)


def with_seed(spec: AttackSpec, seed: int) -> AttackSpec:
    return replace(spec, seed=seed)
