"""Training procedures and baseline defenses.

Modes: standard (clean minimization of the combined objective), at_circle
(mixed-attack adversarial training regularized by circle loss), pgd_at
(all-PGD, the at_circle degenerate with mix 1:0:0 and beta 0), fast_at
(single-step random-init FGSM), and distill (temperature-softened teacher).
Randomized-smoothing prediction with abstention rides along.

Within a batch step, adversarial examples are always generated against the
parameters as of the start of that step. Everything is bit-deterministic
given (seed, dataset, spec).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from math import comb

import numpy as np

from . import autodiff as ad
from . import attacks, losses, nets
from .attacks import AttackSpec
from .data import SignalDataset
from .losses import CombinedLossSpec

ABSTAIN = -1

MODES = ("standard", "at_circle", "pgd_at", "fast_at", "distill")


class TrainError(Exception):
    pass


class DivergenceError(TrainError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class DistillSpec:
    temperature: float = 2048.0
    balance: float = 0.4  # weight on the soft-target term
    teacher_path: str | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise TrainError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.balance <= 1.0:
            raise TrainError(f"balance must be in [0,1], got {self.balance}")


@dataclass(frozen=True)
class SmoothingSpec:
    sigma: float
    n_samples: int = 100
    alpha_fail: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise TrainError(f"sigma must be >= 0, got {self.sigma}")
        if self.n_samples < 2:
            raise TrainError(f"n_samples must be >= 2, got {self.n_samples}")
        if not 0.0 < self.alpha_fail < 1.0:
            raise TrainError(f"alpha_fail must be in (0,1), got {self.alpha_fail}")


@dataclass(frozen=True)
class TrainSpec:
    mode: str = "standard"
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    optimizer: str = "sgd_momentum"  # sgd | sgd_momentum (0.9)
    seed: int = 0
    attack_mix: tuple[float, float, float] = (3.0, 1.0, 1.0)  # pgd : fgsm : cw
    attack_specs: dict = field(default_factory=dict)  # family -> AttackSpec
    loss_spec: CombinedLossSpec = field(default_factory=lambda: CombinedLossSpec(beta=0.0))
    distill: DistillSpec | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise TrainError(f"unknown mode {self.mode!r} (expected one of {MODES})")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise TrainError(f"unknown optimizer {self.optimizer!r}")
        if self.mode == "at_circle":
            if any(p < 0 for p in self.attack_mix) or sum(self.attack_mix) == 0:
                raise TrainError(f"attack_mix must be >= 0 and not all zero: {self.attack_mix}")


@dataclass
class TrainLog:
    loss: list[float] = field(default_factory=list)
    clean_accuracy: list[float] = field(default_factory=list)
    adv_accuracy: list[float] = field(default_factory=list)
    attack_counts: list[dict] = field(default_factory=list)


def largest_remainder_counts(total: int, proportions) -> list[int]:
    """Апportion `total` by proportions; deterministic largest-remainder ties."""
    props = np.asarray(proportions, dtype=np.float64)
    if (props < 0).any() or props.sum() == 0:
        raise TrainError(f"bad proportions {proportions}")
    quotas = props / props.sum() * total
    counts = np.floor(quotas).astype(int)
    short = total - counts.sum()
    # stable order: largest fractional remainder first, earlier family on ties
    order = sorted(range(len(props)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts.tolist()


class _SGD:
    def __init__(self, params: list[ad.Tensor], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            if self.momentum > 0.0:
                v *= np.float32(self.momentum)
                v += p.grad
                p.data -= np.float32(self.lr) * v
            else:
                p.data -= np.float32(self.lr) * p.grad
            p.zero_grad()
            if not np.isfinite(p.data).all() or np.abs(p.data).max() > 1e6:
                raise DivergenceError("parameter scale diverged; lower the learning rate")


def _epoch_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    out = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if b.size >= 2]  # pair losses need >= 2 samples


def _accuracy(net: nets.Network, x: np.ndarray, labels: np.ndarray) -> float:
    return float((attacks.predict(net, x) == labels).mean())


def _train_step(net: nets.Network, opt: _SGD, x_np: np.ndarray, labels, loss_spec: CombinedLossSpec) -> float:
    x = ad.Tensor(x_np)
    try:
        tape = ad.Tape()
        with tape:
            loss = losses.combined_loss(net, x, labels, loss_spec)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"loss diverged ({value})")
        ad.backward(tape, loss)
    except ad.NonFiniteError as exc:
        raise DivergenceError(f"training diverged: {exc}") from exc
    opt.step()
    return value


def standard_train(net: nets.Network, dataset: SignalDataset, spec: TrainSpec) -> tuple[nets.Network, TrainLog]:
    """Minimize the combined loss on clean inputs (beta = 0 is plain CE)."""
    if spec.mode != "standard":
        raise TrainError(f"standard_train called with mode {spec.mode!r}")
    rng = np.random.default_rng(spec.seed)
    opt = _SGD(net.parameters(), spec.learning_rate, 0.9 if spec.optimizer == "sgd_momentum" else 0.0)
    log = TrainLog()
    x_all, y_all = dataset.samples, dataset.labels
    for _ in range(spec.epochs):
        batch_losses = []
        for idx in _epoch_batches(len(dataset), spec.batch_size, rng):
            batch_losses.append(_train_step(net, opt, x_all[idx], y_all[idx], spec.loss_spec))
        log.loss.append(float(np.mean(batch_losses)))
        log.clean_accuracy.append(_accuracy(net, x_all, y_all))
        log.attack_counts.append({})
    net.metadata.update(mode=spec.mode, seed=spec.seed, epochs=spec.epochs, beta=spec.loss_spec.beta)
    return net, log


_MIX_FAMILIES = ("pgd", "fgsm", "cw")


def _training_attack(net, x, labels, family: str, spec: TrainSpec, seed: int) -> np.ndarray:
    """One family's adversarial batch; falls back to clean samples on failure."""
    aspec = spec.attack_specs.get(family)
    if aspec is None:
        raise TrainError(f"no attack spec for family {family!r} in TrainSpec.attack_specs")
    try:
        adv = attacks.run_attack(net, x, labels, attacks.with_seed(aspec, seed))
        return adv.x_adv.data
    except (attacks.AttackError, ad.NonFiniteError):
        return x.copy()


def adversarial_train(net: nets.Network, dataset: SignalDataset, spec: TrainSpec) -> tuple[nets.Network, TrainLog]:
    """Alg.-style minimax loop: attack the current parameters, then descend.

    at_circle splits each batch by attack_mix (largest remainder) across
    pgd/fgsm/cw; pgd_at is the same loop pinned to mix (1,0,0); fast_at uses
    the single-step random-init FGSM spec under the 'fast' key.
    """
    if spec.mode not in ("at_circle", "pgd_at", "fast_at"):
        raise TrainError(f"adversarial_train called with mode {spec.mode!r}")
    rng = np.random.default_rng(spec.seed)
    opt = _SGD(net.parameters(), spec.learning_rate, 0.9 if spec.optimizer == "sgd_momentum" else 0.0)
    log = TrainLog()
    x_all, y_all = dataset.samples, dataset.labels
    mix = spec.attack_mix if spec.mode == "at_circle" else (1.0, 0.0, 0.0)

    for _ in range(spec.epochs):
        batch_losses = []
        adv_correct = 0
        adv_total = 0
        counts_epoch = dict.fromkeys(_MIX_FAMILIES, 0)
        for idx in _epoch_batches(len(dataset), spec.batch_size, rng):
            x, y = x_all[idx], y_all[idx]
            attack_seed = int(rng.integers(0, 2**63))
            if spec.mode == "fast_at":
                x_adv = _training_attack(net, x, y, "fast", spec, attack_seed)
                counts_epoch["fgsm"] += len(idx)
            else:
                counts = largest_remainder_counts(len(idx), mix)
                parts = []
                lo = 0
                for family, cnt in zip(_MIX_FAMILIES, counts):
                    if cnt == 0:
                        continue
                    sl = slice(lo, lo + cnt)
                    parts.append(_training_attack(net, x[sl], y[sl], family, spec, attack_seed))
                    counts_epoch[family] += cnt
                    lo += cnt
                x_adv = np.concatenate(parts, axis=0)
            adv_correct += int((attacks.predict(net, x_adv) == y).sum())
            adv_total += len(idx)
            batch_losses.append(_train_step(net, opt, x_adv, y, spec.loss_spec))
        log.loss.append(float(np.mean(batch_losses)))
        log.clean_accuracy.append(_accuracy(net, x_all, y_all))
        log.adv_accuracy.append(adv_correct / adv_total)
        log.attack_counts.append(counts_epoch)
    net.metadata.update(mode=spec.mode, seed=spec.seed, epochs=spec.epochs, beta=spec.loss_spec.beta)
    return net, log


# ---------------------------------------------------------------------------
# distillation


def _soft_targets(teacher: nets.Network, x: np.ndarray, temperature: float) -> np.ndarray:
    logits = nets.forward_logits(teacher, ad.Tensor(x)).data.astype(np.float64) / temperature
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def distill_batch_loss(student: nets.Network, x: ad.Tensor, labels, teacher_probs: np.ndarray,
                       temperature: float, balance: float) -> ad.Tensor:
    """balance * T^2 * CE(soft_s, soft_t) + (1 - balance) * CE(logits, labels)."""
    logits = nets.forward_logits(student, x)
    scaled = ad.mul(logits, 1.0 / temperature)
    soft = losses.soft_cross_entropy(scaled, teacher_probs)
    hard = losses.cross_entropy_from_logits(logits, labels)
    return ad.add(ad.mul(soft, balance * temperature**2), ad.mul(hard, 1.0 - balance))


def distill_train(student: nets.Network, dataset: SignalDataset, spec: TrainSpec) -> tuple[nets.Network, TrainLog]:
    """Teacher first (trained at temperature T, or loaded), then the student."""
    if spec.mode != "distill" or spec.distill is None:
        raise TrainError("distill_train needs mode='distill' and a DistillSpec")
    d = spec.distill
    if d.teacher_path is not None:
        try:
            teacher = nets.load(d.teacher_path)
        except OSError as exc:
            raise TrainError(f"missing teacher checkpoint {d.teacher_path}: {exc}") from exc
        if [ly.to_dict() for ly in teacher.layers] != [ly.to_dict() for ly in student.layers]:
            raise TrainError("teacher and student must share the same architecture")
    else:
        teacher = nets.build(student.layers, spec.seed + 1, student.input_shape, student.class_count)
        _temperature_train(teacher, dataset, spec, d.temperature)

    rng = np.random.default_rng(spec.seed)
    opt = _SGD(student.parameters(), spec.learning_rate, 0.9 if spec.optimizer == "sgd_momentum" else 0.0)
    log = TrainLog()
    x_all, y_all = dataset.samples, dataset.labels
    for _ in range(spec.epochs):
        batch_losses = []
        for idx in _epoch_batches(len(dataset), spec.batch_size, rng):
            x, y = x_all[idx], y_all[idx]
            probs = _soft_targets(teacher, x, d.temperature)
            xt = ad.Tensor(x)
            tape = ad.Tape()
            with tape:
                loss = distill_batch_loss(student, xt, y, probs, d.temperature, d.balance)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"distill loss diverged ({value})")
            ad.backward(tape, loss)
            opt.step()
            batch_losses.append(value)
        log.loss.append(float(np.mean(batch_losses)))
        log.clean_accuracy.append(_accuracy(student, x_all, y_all))
        log.attack_counts.append({})
    student.metadata.update(mode="distill", seed=spec.seed, epochs=spec.epochs,
                            temperature=d.temperature, balance=d.balance)
    return student, log


def _temperature_train(net: nets.Network, dataset: SignalDataset, spec: TrainSpec, temperature: float) -> None:
    """Standard training with temperature-scaled logits (defensive-distillation teacher)."""
    rng = np.random.default_rng(spec.seed + 1)
    opt = _SGD(net.parameters(), spec.learning_rate, 0.9 if spec.optimizer == "sgd_momentum" else 0.0)
    x_all, y_all = dataset.samples, dataset.labels
    for _ in range(spec.epochs):
        for idx in _epoch_batches(len(dataset), spec.batch_size, rng):
            x = ad.Tensor(x_all[idx])
            tape = ad.Tape()
            with tape:
                logits = nets.forward_logits(net, x)
                loss = losses.cross_entropy_from_logits(ad.mul(logits, 1.0 / temperature), y_all[idx])
            if not np.isfinite(loss.item()):
                raise DivergenceError("teacher loss diverged")
            ad.backward(tape, loss)
            opt.step()


def train(net: nets.Network, dataset: SignalDataset, spec: TrainSpec) -> tuple[nets.Network, TrainLog]:
    if spec.mode == "standard":
        return standard_train(net, dataset, spec)
    if spec.mode == "distill":
        return distill_train(net, dataset, spec)
    return adversarial_train(net, dataset, spec)


# ---------------------------------------------------------------------------
# randomized smoothing (prediction with abstention)


def binomial_tail_half(k: int, n: int) -> Fraction:
    """Exact P[Binomial(n, 1/2) >= k]."""
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    return Fraction(sum(comb(n, i) for i in range(k, n + 1)), 2**n)


def smoothing_decision(n_top: int, n_runner: int, alpha_fail: float) -> bool:
    """True when the top class is statistically safe to return (reject p=1/2)."""
    return binomial_tail_half(n_top, n_top + n_runner) <= Fraction(alpha_fail)


def rs_predict(net: nets.Network, x, spec: SmoothingSpec, batch: int = 256) -> int:
    """Majority vote over Gaussian draws; ABSTAIN when the top-2 split is unsafe.

    sigma = 0 short-circuits to the base classifier: all draws are the input
    itself, so there is no Monte Carlo uncertainty to control.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.shape == net.input_shape:
        x = x[None]
    if x.shape[0] != 1:
        raise TrainError(f"rs_predict takes a single sample, got batch {x.shape}")
    if spec.sigma == 0.0:
        return int(attacks.predict(net, x)[0])

    rng = np.random.default_rng(spec.seed)
    counts = np.zeros(net.class_count, dtype=np.int64)
    remaining = spec.n_samples
    while remaining > 0:
        m = min(batch, remaining)
        noisy = x + rng.normal(0.0, spec.sigma, size=(m,) + x.shape[1:]).astype(np.float32)
        counts += np.bincount(attacks.predict(net, noisy), minlength=net.class_count)
        remaining -= m
    top2 = np.argsort(-counts, kind="stable")[:2]
    n_top, n_runner = int(counts[top2[0]]), int(counts[top2[1]])
    if smoothing_decision(n_top, n_runner, spec.alpha_fail):
        return int(top2[0])
    return ABSTAIN


def rs_predict_batch(net: nets.Network, x, spec: SmoothingSpec) -> np.ndarray:
    """rs_predict over a batch; each sample gets its own derived seed."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    out = np.empty(x.shape[0], dtype=np.int64)
    for i in range(x.shape[0]):
        out[i] = rs_predict(net, x[i : i + 1], replace(spec, seed=spec.seed + i))
    return out
