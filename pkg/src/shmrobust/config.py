"""Experiment configuration: one JSON document, strict keys, typed accessors.

Sections: dataset / model / train / attacks / eval. Unknown keys are
rejected with the offending dotted path so typos never silently fall back
to defaults.
"""

from __future__ import annotations

import json

from .attacks import AttackSpec
from .defenses import DistillSpec, SmoothingSpec, TrainSpec
from .losses import CircleParams, CombinedLossSpec


class ConfigError(Exception):
    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


_DEFAULTS = {
    "dataset": {
        "kind": "synthetic",  # synthetic | csv
        "path": "",
        "samples_per_class": 200,
        "split_ratio": 0.7,
        "normalize": "per_channel_zscore",  # per_channel_zscore | global_minmax | none
        "features": "raw",  # raw | frf
        "frf_segments": 4,
    },
    "model": {
        "preset": "mlp",  # mlp | cnn
        "hidden": 17,
        "seed": None,  # falls back to the run seed
    },
    "train": {
        "mode": "standard",
        "epochs": None,  # None -> benchmark default for the mode
        "batch_size": 32,
        "learning_rate": 0.01,
        "optimizer": "sgd_momentum",
        "attack_mix": [3.0, 1.0, 1.0],
        "beta": None,  # None -> benchmark default for the mode
        "circle_margin": 0.25,
        "circle_gamma": 32.0,
        "tap_ids": ["penultimate"],
        "anchor_reduction": "mean",
        "distill_temperature": 2048.0,
        "distill_balance": 0.4,
        "teacher_path": None,
    },
    "attacks": {
        "epsilon": "auto",  # float | "auto" (calibrated)
        "pgd_iters": 20,
        "bim_iters": 20,
        "step_divisor": 8.0,
        "cw_c": 1e-4,
        "cw_k": 0.0,
        "cw_iters": 100,
        "cw_lr": 0.01,
        "clamp_lo": None,
        "clamp_hi": None,
        "families": ["fgsm", "bim", "pgd", "cw_l2"],
    },
    "eval": {
        "sigmas": [0.0, 0.1, 0.2, 0.3, 0.4],
        "tap_subsets": "all",  # "all" | list of tap lists
        "smoothing_sigma": 0.1,
        "smoothing_samples": 100,
        "smoothing_alpha": 0.1,
        "models": [],  # checkpoint paths for transfer
    },
}


def _merge(defaults: dict, given: dict, path: str) -> dict:
    out = dict(defaults)
    for key, value in given.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown key (allowed: {sorted(defaults)})", here)
        if isinstance(defaults[key], dict) and not isinstance(value, dict):
            raise ConfigError(f"expected a table, got {type(value).__name__}", here)
        out[key] = _merge(defaults[key], value, here) if isinstance(defaults[key], dict) else value
    return out


def load_config(path_or_dict) -> dict:
    """Read and validate an experiment config; missing keys take defaults."""
    if isinstance(path_or_dict, dict):
        raw = path_or_dict
    else:
        try:
            with open(path_or_dict, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = _merge(_DEFAULTS, raw, "")
    _validate(cfg)
    return cfg


def _require(cond: bool, message: str, path: str):
    if not cond:
        raise ConfigError(message, path)


def _validate(cfg: dict) -> None:
    d = cfg["dataset"]
    _require(d["kind"] in ("synthetic", "csv"), f"kind must be synthetic|csv, got {d['kind']!r}", "dataset.kind")
    _require(0.0 < d["split_ratio"] < 1.0, f"split_ratio must be in (0,1), got {d['split_ratio']}", "dataset.split_ratio")
    _require(d["normalize"] in ("per_channel_zscore", "global_minmax", "none"),
             f"bad normalize {d['normalize']!r}", "dataset.normalize")
    _require(d["features"] in ("raw", "frf"), f"features must be raw|frf, got {d['features']!r}", "dataset.features")
    if d["kind"] == "csv":
        _require(bool(d["path"]), "csv dataset needs a path", "dataset.path")

    m = cfg["model"]
    _require(m["preset"] in ("mlp", "cnn"), f"preset must be mlp|cnn, got {m['preset']!r}", "model.preset")
    _require(int(m["hidden"]) >= 1, "hidden must be >= 1", "model.hidden")

    t = cfg["train"]
    _require(t["mode"] in ("standard", "at_circle", "pgd_at", "fast_at", "distill"),
             f"bad mode {t['mode']!r}", "train.mode")
    _require(len(t["attack_mix"]) == 3 and all(v >= 0 for v in t["attack_mix"]),
             "attack_mix must be three non-negative numbers", "train.attack_mix")
    _require(t["optimizer"] in ("sgd", "sgd_momentum"), f"bad optimizer {t['optimizer']!r}", "train.optimizer")
    _require(0.0 < float(t["circle_margin"]) < 1.0, "circle_margin must be in (0,1)", "train.circle_margin")
    _require(float(t["circle_gamma"]) > 0, "circle_gamma must be > 0", "train.circle_gamma")

    a = cfg["attacks"]
    if a["epsilon"] != "auto":
        _require(float(a["epsilon"]) >= 0, "epsilon must be >= 0 or 'auto'", "attacks.epsilon")
    _require(a["pgd_iters"] >= 1 and a["bim_iters"] >= 1, "iters must be >= 1", "attacks.pgd_iters")
    for fam in a["families"]:
        _require(fam in ("fgsm", "bim", "pgd", "cw_l2", "gaussian"), f"unknown family {fam!r}", "attacks.families")

    e = cfg["eval"]
    _require(all(s >= 0 for s in e["sigmas"]), "sigmas must be >= 0", "eval.sigmas")
    _require(0 < float(e["smoothing_alpha"]) < 1, "smoothing_alpha in (0,1)", "eval.smoothing_alpha")


# ---------------------------------------------------------------------------
# typed builders


def attack_spec_from_config(cfg: dict, family: str, epsilon: float, seed: int = 0) -> AttackSpec:
    a = cfg["attacks"]
    clamp = None
    if a["clamp_lo"] is not None and a["clamp_hi"] is not None:
        clamp = (float(a["clamp_lo"]), float(a["clamp_hi"]))
    common = dict(epsilon=epsilon, clamp_range=clamp, seed=seed)
    if family == "fgsm":
        return AttackSpec("fgsm", **common)
    if family == "bim":
        return AttackSpec("bim", step=epsilon / a["step_divisor"], iters=int(a["bim_iters"]), **common)
    if family == "pgd":
        return AttackSpec("pgd", step=epsilon / a["step_divisor"], iters=int(a["pgd_iters"]),
                          random_start=True, **common)
    if family == "cw_l2":
        return AttackSpec("cw_l2", cw_c=float(a["cw_c"]), cw_k=float(a["cw_k"]),
                          cw_iters=int(a["cw_iters"]), cw_lr=float(a["cw_lr"]), **common)
    if family == "gaussian":
        return AttackSpec("gaussian", **common)
    raise ConfigError(f"unknown family {family!r}", "attacks.families")


def train_spec_from_config(cfg: dict, epsilon: float, seed: int) -> TrainSpec:
    from . import evaluate  # local import: evaluate builds on config-free pieces

    t = cfg["train"]
    mode = t["mode"]
    beta = t["beta"]
    if beta is None:
        beta = 0.1 if mode == "at_circle" else 0.0
    loss_spec = CombinedLossSpec(
        circle=CircleParams(float(t["circle_margin"]), float(t["circle_gamma"])),
        beta=float(beta),
        tap_ids=tuple(t["tap_ids"]) if beta > 0 else ("penultimate",),
        anchor_reduction=t["anchor_reduction"],
    )
    epochs = t["epochs"]
    if epochs is None:
        epochs = evaluate.benchmark_train_spec(mode, epsilon, seed).epochs
    distill = None
    if mode == "distill":
        distill = DistillSpec(float(t["distill_temperature"]), float(t["distill_balance"]),
                              t["teacher_path"])
    return TrainSpec(
        mode=mode,
        epochs=int(epochs),
        batch_size=int(t["batch_size"]),
        learning_rate=float(t["learning_rate"]),
        optimizer=t["optimizer"],
        seed=seed,
        attack_mix=tuple(float(v) for v in t["attack_mix"]),
        attack_specs=evaluate.benchmark_attack_specs(epsilon),
        loss_spec=loss_spec,
        distill=distill,
    )


def smoothing_spec_from_config(cfg: dict, seed: int) -> SmoothingSpec:
    e = cfg["eval"]
    return SmoothingSpec(float(e["smoothing_sigma"]), int(e["smoothing_samples"]),
                         float(e["smoothing_alpha"]), seed)
