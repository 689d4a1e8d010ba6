"""Experiment orchestration: robustness tables, transfer matrices, sweeps, ablation.

Every report embeds the config hash and seed that produced it, so a report
is reproducible from (config JSON, seed) alone. Accuracy cells are percent
of adversarial (or noisy) examples still classified correctly.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks, data, defenses, losses, nets
from . import autodiff as ad
from .attacks import AttackSpec
from .defenses import TrainSpec
from .losses import CircleParams, CombinedLossSpec


class EvalError(Exception):
    pass


def config_hash(config: dict, seed: int) -> str:
    canonical = json.dumps({"config": config, "seed": seed}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass
class AttackRow:
    attack: str
    epsilon: float
    accuracy_pct: float
    mean_delta_l2: float
    mean_snr_db: float | None  # None when every delta is zero
    sample_count: int


@dataclass
class RobustnessReport:
    model_id: str
    clean_accuracy_pct: float
    rows: list[AttackRow]
    config_hash: str = ""
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": "robustness",
            "model_id": self.model_id,
            "clean_accuracy_pct": self.clean_accuracy_pct,
            "rows": [vars(r) for r in self.rows],
            "config_hash": self.config_hash,
            "seed": self.seed,
        }


@dataclass
class TransferMatrix:
    source_ids: list[str]
    target_ids: list[str]
    accuracy_pct: list[list[float]]  # [source][target]
    attack: str
    epsilon: float
    config_hash: str = ""
    seed: int = 0

    def column_means(self) -> list[float]:
        arr = np.asarray(self.accuracy_pct)
        return [float(v) for v in arr.mean(axis=0)]

    def row_means(self) -> list[float]:
        arr = np.asarray(self.accuracy_pct)
        return [float(v) for v in arr.mean(axis=1)]

    def diagonal_mean(self) -> float:
        arr = np.asarray(self.accuracy_pct)
        return float(np.diag(arr).mean())

    def off_diagonal_mean(self) -> float:
        arr = np.asarray(self.accuracy_pct)
        mask = ~np.eye(arr.shape[0], dtype=bool)
        return float(arr[mask].mean())

    def to_dict(self) -> dict:
        return {
            "kind": "transfer",
            "attack": self.attack,
            "epsilon": self.epsilon,
            "source_ids": self.source_ids,
            "target_ids": self.target_ids,
            "accuracy_pct": self.accuracy_pct,
            "column_means": self.column_means(),
            "row_means": self.row_means(),
            "config_hash": self.config_hash,
            "seed": self.seed,
        }


def accuracy_pct(net: nets.Network, x: np.ndarray, labels: np.ndarray) -> float:
    return float((attacks.predict(net, x) == labels).mean() * 100.0)


def evaluate_robustness(net: nets.Network, split: data.SignalDataset, attack_specs: list[AttackSpec],
                        model_id: str = "model", cfg_hash: str = "", seed: int = 0) -> RobustnessReport:
    """Accuracy under each attack plus perturbation statistics per row."""
    x, y = split.samples, split.labels
    rows = []
    for spec in attack_specs:
        adv = attacks.run_attack(net, x, y, spec)
        finite = np.isfinite(adv.snr_db)
        rows.append(AttackRow(
            attack=spec.family,
            epsilon=float(spec.epsilon),
            accuracy_pct=float((~adv.success).mean() * 100.0),
            mean_delta_l2=float(adv.delta_l2.mean()),
            mean_snr_db=float(adv.snr_db[finite].mean()) if finite.any() else None,
            sample_count=int(len(adv)),
        ))
    return RobustnessReport(model_id, accuracy_pct(net, x, y), rows, cfg_hash, seed)


def transfer_matrix(models: list[tuple[str, nets.Network]], attack_spec: AttackSpec,
                    split: data.SignalDataset, cfg_hash: str = "", seed: int = 0) -> TransferMatrix:
    """Cell (s, t): accuracy of model t on examples generated against model s."""
    if len(models) < 1:
        raise EvalError("transfer_matrix needs at least one model")
    shapes = {net.input_shape for _, net in models}
    classes = {net.class_count for _, net in models}
    if len(shapes) != 1 or len(classes) != 1:
        raise EvalError(f"models disagree on input shape {shapes} or class count {classes}")
    x, y = split.samples, split.labels
    cells = []
    for _, source in models:
        adv = attacks.run_attack(source, x, y, attack_spec)
        cells.append([accuracy_pct(target, adv.x_adv.data, y) for _, target in models])
    ids = [mid for mid, _ in models]
    return TransferMatrix(ids, list(ids), cells, attack_spec.family, float(attack_spec.epsilon),
                          cfg_hash, seed)


def gaussian_sweep(net: nets.Network, split: data.SignalDataset, sigmas, seed: int = 0) -> list[dict]:
    """Accuracy per noise level; sigma = 0 is exactly the clean accuracy."""
    out = []
    for i, sigma in enumerate(sigmas):
        if sigma < 0:
            raise EvalError(f"sigma must be >= 0, got {sigma}")
        noisy = attacks.gaussian_perturb(split.samples, float(sigma), seed + i)
        out.append({"sigma": float(sigma), "accuracy_pct": accuracy_pct(net, noisy, split.labels)})
    return out


def feature_geometry(net: nets.Network, split: data.SignalDataset, tap_id: str | None = None) -> dict:
    """Mean intra-class and inter-class cosine similarity of tap features."""
    tap = tap_id or net.penultimate_tap()
    f = nets.features_at(net, ad.Tensor(split.samples), tap).data
    sim = f @ f.T
    labels = split.labels
    same = labels[:, None] == labels[None, :]
    eye = np.eye(len(labels), dtype=bool)
    return {
        "tap": tap,
        "intra_class_mean": float(sim[same & ~eye].mean()),
        "inter_class_mean": float(sim[~same].mean()),
    }


def calibrate_epsilon(net: nets.Network, split: data.SignalDataset, target_accuracy: float = 0.30,
                      grid=None, iters: int = 20, seed: int = 0) -> dict:
    """Smallest grid epsilon where PGD-20 accuracy falls below the target.

    The default grid is geometric (factor 1.25 from 0.04). Falls back to the
    largest grid value when even that never crosses the target.
    """
    if grid is None:
        grid = [0.04 * 1.25**k for k in range(14)]
    history = []
    for eps in grid:
        spec = AttackSpec("pgd", epsilon=float(eps), step=float(eps) / 8.0, iters=iters,
                          random_start=True, seed=seed)
        adv = attacks.run_attack(net, split.samples, split.labels, spec)
        acc = float((~adv.success).mean())
        history.append({"epsilon": float(eps), "pgd_accuracy": acc})
        if acc < target_accuracy:
            return {"epsilon": float(eps), "converged": True, "history": history}
    return {"epsilon": float(grid[-1]), "converged": False, "history": history}


# ---------------------------------------------------------------------------
# benchmark recipe shared by the CLI and the acceptance suite


def benchmark_attack_specs(epsilon: float) -> dict[str, AttackSpec]:
    """Training-time attack specs at a calibrated budget."""
    return {
        "pgd": AttackSpec("pgd", epsilon=epsilon, step=epsilon / 8.0, iters=10, random_start=True),
        "fgsm": AttackSpec("fgsm", epsilon=epsilon),
        "cw": AttackSpec("cw_l2", cw_c=1e-4, cw_k=0.0, cw_iters=50, cw_lr=0.01),
        "fast": AttackSpec("pgd", epsilon=epsilon, step=1.5 * epsilon, iters=1, random_start=True),
    }


def eval_attack_specs(epsilon: float, seed: int = 0) -> dict[str, AttackSpec]:
    return {
        "pgd20": AttackSpec("pgd", epsilon=epsilon, step=epsilon / 8.0, iters=20, random_start=True, seed=seed),
        "bim20": AttackSpec("bim", epsilon=epsilon, step=epsilon / 8.0, iters=20),
        "fgsm": AttackSpec("fgsm", epsilon=epsilon),
    }


def benchmark_train_spec(mode: str, epsilon: float, seed: int, beta: float | None = None,
                         epochs: int | None = None, tap_ids: tuple[str, ...] = ("penultimate",)) -> TrainSpec:
    """Per-mode training recipe for the desk-scale benchmark."""
    if beta is None:
        beta = 0.1 if mode == "at_circle" else 0.0
    loss_spec = CombinedLossSpec(circle=CircleParams(0.25, 32.0), beta=beta,
                                 tap_ids=tap_ids if beta > 0 else ("penultimate",))
    return TrainSpec(
        mode=mode,
        epochs=epochs if epochs is not None else (60 if mode != "standard" else 40),
        batch_size=32,
        learning_rate=0.01,
        optimizer="sgd_momentum",
        seed=seed,
        attack_mix=(3.0, 1.0, 1.0),
        attack_specs=benchmark_attack_specs(epsilon),
        loss_spec=loss_spec,
    )


# ---------------------------------------------------------------------------
# layer ablation


def ablate_layers(build_net, dataset_train: data.SignalDataset, dataset_val: data.SignalDataset,
                  tap_subsets: list[tuple[str, ...]], base_spec: TrainSpec,
                  epsilon: float, beta: float = 0.1) -> list[dict]:
    """One at_circle run per tap subset (shared seed), scored clean/FGSM/BIM.

    The empty subset is the no-circle row (beta effectively absent). The
    penultimate-only subset is flagged as the recommended default.
    """
    eval_specs = eval_attack_specs(epsilon, seed=base_spec.seed)
    rows = []
    for subset in tap_subsets:
        net = build_net()
        if subset:
            loss_spec = replace(base_spec.loss_spec, beta=beta, tap_ids=tuple(subset))
        else:
            loss_spec = replace(base_spec.loss_spec, beta=0.0)
        spec = replace(base_spec, loss_spec=loss_spec)
        net, _ = defenses.train(net, dataset_train, spec)
        x, y = dataset_val.samples, dataset_val.labels
        fg = attacks.run_attack(net, x, y, eval_specs["fgsm"])
        bm = attacks.run_attack(net, x, y, eval_specs["bim20"])
        rows.append({
            "taps": "+".join(subset) if subset else "none",
            "clean_pct": accuracy_pct(net, x, y),
            "fgsm_pct": float((~fg.success).mean() * 100.0),
            "bim_pct": float((~bm.success).mean() * 100.0),
            "recommended": tuple(subset) == (net.penultimate_tap(),),
        })
    return rows


# ---------------------------------------------------------------------------
# report emission


def _rounded(value, places=2):
    if value is None:
        return ""
    return f"{value:.{places}f}"


def emit_report(report, fmt: str, path) -> None:
    """Write a report as JSON (full precision) or CSV (2-decimal floats)."""
    if fmt not in ("json", "csv"):
        raise EvalError(f"unknown report format {fmt!r}")
    payload = report.to_dict() if hasattr(report, "to_dict") else report
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return

    kind = payload.get("kind", "rows") if isinstance(payload, dict) else "rows"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if kind == "robustness":
            writer.writerow(["model_id", "attack", "epsilon", "accuracy_pct",
                             "mean_delta_l2", "mean_snr_db", "sample_count"])
            writer.writerow([payload["model_id"], "clean", _rounded(0.0, 4),
                             _rounded(payload["clean_accuracy_pct"]), "", "", ""])
            for r in payload["rows"]:
                writer.writerow([payload["model_id"], r["attack"], _rounded(r["epsilon"], 4),
                                 _rounded(r["accuracy_pct"]), _rounded(r["mean_delta_l2"], 4),
                                 _rounded(r["mean_snr_db"]), r["sample_count"]])
        elif kind == "transfer":
            writer.writerow(["source\\target"] + payload["target_ids"])
            for sid, row in zip(payload["source_ids"], payload["accuracy_pct"]):
                writer.writerow([sid] + [_rounded(v) for v in row])
            writer.writerow(["mean"] + [_rounded(v) for v in payload["column_means"]])
        else:
            rows = payload["rows"] if isinstance(payload, dict) and "rows" in payload else payload
            if not rows:
                writer.writerow([])
                return
            cols = list(rows[0].keys())
            writer.writerow(cols)
            for r in rows:
                writer.writerow([_rounded(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
