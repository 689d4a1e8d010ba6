"""Command-line driver for the experiment harness.

Subcommands: gen-data, train, attack, eval, transfer, gauss, ablate, report.
Global flags: --config <json>, --seed <u64>, --out <dir>. Exit codes:
0 success, 2 config error, 3 numeric divergence, 4 I/O error.

Reports carry no timestamps; two runs with the same config and seed emit
byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import attacks, config as cfgmod, data, defenses, evaluate, nets
from . import autodiff as ad
from .config import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _build_dataset(cfg: dict, seed: int) -> data.SignalDataset:
    d = cfg["dataset"]
    if d["kind"] == "csv":
        ds = data.load_csv(d["path"])
    else:
        ds = data.generate(data.default_synth_spec(seed=seed, samples_per_class=int(d["samples_per_class"])))
    if d["features"] == "frf":
        feats = data.frf_features(ds, segments=int(d["frf_segments"]))
        ds = data.SignalDataset(feats, ds.labels, ds.class_names, ds.sample_rate,
                                provenance=dict(ds.provenance, features="frf"))
    return ds


def _prepared_splits(cfg: dict, seed: int):
    ds = _build_dataset(cfg, seed)
    train, val = data.split(ds, float(cfg["dataset"]["split_ratio"]), seed)
    mode = cfg["dataset"]["normalize"]
    if mode != "none":
        train, stats = data.normalize(train, mode)
        val = data.apply_normalizer(val, stats)
    return train, val


def _build_model(cfg: dict, input_shape, class_count: int, seed: int) -> nets.Network:
    m = cfg["model"]
    model_seed = seed if m["seed"] is None else int(m["seed"])
    if m["preset"] == "cnn":
        return nets.build_cnn(input_shape, class_count, seed=model_seed)
    return nets.build_mlp(input_shape, class_count, hidden=int(m["hidden"]), seed=model_seed)


def _resolve_epsilon(cfg: dict, seed: int, train_split, val_split) -> tuple[float, dict | None]:
    a = cfg["attacks"]
    if a["epsilon"] != "auto":
        return float(a["epsilon"]), None
    net = _build_model(cfg, train_split.input_shape, train_split.class_count, seed)
    spec = evaluate.benchmark_train_spec("standard", 0.0, seed)
    net, _ = defenses.train(net, train_split, spec)
    cal = evaluate.calibrate_epsilon(net, val_split, seed=seed)
    return float(cal["epsilon"]), cal


def _write_json(payload, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg) -> int:
    out = _out_dir(args)
    ds = _build_dataset(cfg, args.seed)
    path = os.path.join(out, "dataset.csv")
    data.save_csv(ds, path)
    _write_json({
        "kind": "dataset",
        "path": os.path.basename(path),
        "samples": len(ds),
        "classes": ds.class_names,
        "input_shape": list(ds.input_shape),
        "config_hash": evaluate.config_hash(cfg, args.seed),
        "seed": args.seed,
    }, os.path.join(out, "dataset.json"))
    print(f"wrote {path} ({len(ds)} samples)")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    out = _out_dir(args)
    train_split, val_split = _prepared_splits(cfg, args.seed)
    epsilon, _ = _resolve_epsilon(cfg, args.seed, train_split, val_split)
    net = _build_model(cfg, train_split.input_shape, train_split.class_count, args.seed)
    spec = cfgmod.train_spec_from_config(cfg, epsilon, args.seed)
    net, log = defenses.train(net, train_split, spec)
    ckpt = os.path.join(out, f"{spec.mode}.ckpt")
    nets.save(net, ckpt)
    _write_json({
        "kind": "train_log",
        "mode": spec.mode,
        "epsilon": epsilon,
        "checkpoint": os.path.basename(ckpt),
        "loss": log.loss,
        "clean_accuracy": log.clean_accuracy,
        "adv_accuracy": log.adv_accuracy,
        "final_val_accuracy_pct": evaluate.accuracy_pct(net, val_split.samples, val_split.labels),
        "config_hash": evaluate.config_hash(cfg, args.seed),
        "seed": args.seed,
    }, os.path.join(out, f"{spec.mode}_train.json"))
    print(f"trained {spec.mode} -> {ckpt}")
    return EXIT_OK


def _load_model(path: str) -> nets.Network:
    return nets.load(path)


def cmd_attack(args, cfg) -> int:
    out = _out_dir(args)
    train_split, val_split = _prepared_splits(cfg, args.seed)
    net = _load_model(args.model)
    epsilon, _ = _resolve_epsilon(cfg, args.seed, train_split, val_split)
    family = args.family
    spec = cfgmod.attack_spec_from_config(cfg, family, epsilon, args.seed)
    adv = attacks.run_attack(net, val_split.samples, val_split.labels, spec)
    adv_ds = data.SignalDataset(adv.x_adv.data, val_split.labels, val_split.class_names,
                                val_split.sample_rate, provenance={"kind": f"adv_{family}"})
    path = os.path.join(out, f"adv_{family}.csv")
    data.save_csv(adv_ds, path)
    finite = np.isfinite(adv.snr_db)
    _write_json({
        "kind": "attack",
        "family": family,
        "epsilon": epsilon,
        "success_rate_pct": float(adv.success.mean() * 100.0),
        "mean_delta_l2": float(adv.delta_l2.mean()),
        "mean_delta_linf": float(adv.delta_linf.mean()),
        "mean_snr_db": float(adv.snr_db[finite].mean()) if finite.any() else None,
        "examples_csv": os.path.basename(path),
        "config_hash": evaluate.config_hash(cfg, args.seed),
        "seed": args.seed,
    }, os.path.join(out, f"attack_{family}.json"))
    print(f"attack {family}: success {adv.success.mean() * 100:.1f}% -> {path}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    out = _out_dir(args)
    train_split, val_split = _prepared_splits(cfg, args.seed)
    net = _load_model(args.model)
    epsilon, cal = _resolve_epsilon(cfg, args.seed, train_split, val_split)
    specs = [cfgmod.attack_spec_from_config(cfg, fam, epsilon, args.seed)
             for fam in cfg["attacks"]["families"]]
    report = evaluate.evaluate_robustness(net, val_split, specs, model_id=os.path.basename(args.model),
                                          cfg_hash=evaluate.config_hash(cfg, args.seed), seed=args.seed)
    payload = report.to_dict()
    payload["epsilon"] = epsilon
    if cal is not None:
        payload["calibration"] = cal
    _write_json(payload, os.path.join(out, "robustness.json"))
    evaluate.emit_report(report, "csv", os.path.join(out, "robustness.csv"))
    for row in report.rows:
        print(f"{row.attack:8s} eps={row.epsilon:.4f} acc={row.accuracy_pct:.2f}%")
    return EXIT_OK


def cmd_transfer(args, cfg) -> int:
    out = _out_dir(args)
    train_split, val_split = _prepared_splits(cfg, args.seed)
    paths = args.models or cfg["eval"]["models"]
    if len(paths) < 2:
        raise ConfigError("transfer needs >= 2 model checkpoints (--models or eval.models)")
    models = [(os.path.basename(p), _load_model(p)) for p in paths]
    epsilon, _ = _resolve_epsilon(cfg, args.seed, train_split, val_split)
    family = args.family
    spec = cfgmod.attack_spec_from_config(cfg, family, epsilon, args.seed)
    matrix = evaluate.transfer_matrix(models, spec, val_split,
                                      cfg_hash=evaluate.config_hash(cfg, args.seed), seed=args.seed)
    _write_json(matrix.to_dict(), os.path.join(out, f"transfer_{family}.json"))
    evaluate.emit_report(matrix, "csv", os.path.join(out, f"transfer_{family}.csv"))
    print(f"transfer {family}: diag {matrix.diagonal_mean():.2f}% off-diag {matrix.off_diagonal_mean():.2f}%")
    return EXIT_OK


def cmd_gauss(args, cfg) -> int:
    out = _out_dir(args)
    train_split, val_split = _prepared_splits(cfg, args.seed)
    net = _load_model(args.model)
    rows = evaluate.gaussian_sweep(net, val_split, cfg["eval"]["sigmas"], seed=args.seed)
    payload = {"kind": "gaussian_sweep", "rows": rows,
               "config_hash": evaluate.config_hash(cfg, args.seed), "seed": args.seed}
    _write_json(payload, os.path.join(out, "gauss.json"))
    evaluate.emit_report(payload, "csv", os.path.join(out, "gauss.csv"))
    for row in rows:
        print(f"sigma={row['sigma']:.3f} acc={row['accuracy_pct']:.2f}%")
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    out = _out_dir(args)
    if cfg["model"]["preset"] != "cnn":
        raise ConfigError("layer ablation needs model.preset = cnn (three taps)", "model.preset")
    train_split, val_split = _prepared_splits(cfg, args.seed)
    epsilon, _ = _resolve_epsilon(cfg, args.seed, train_split, val_split)
    taps = ("layer1", "layer2", "layer3")
    subsets_cfg = cfg["eval"]["tap_subsets"]
    if subsets_cfg == "all":
        subsets = [()]
        for k in range(1, len(taps) + 1):
            from itertools import combinations

            subsets.extend(combinations(taps, k))
    else:
        subsets = [tuple(s) for s in subsets_cfg]
    base = cfgmod.train_spec_from_config(dict(cfg, train=dict(cfg["train"], mode="at_circle")),
                                         epsilon, args.seed)
    beta = cfg["train"]["beta"]
    rows = evaluate.ablate_layers(
        lambda: _build_model(cfg, train_split.input_shape, train_split.class_count, args.seed),
        train_split, val_split, subsets, base, epsilon,
        beta=0.1 if beta is None else float(beta),
    )
    payload = {"kind": "ablation", "epsilon": epsilon, "rows": rows,
               "config_hash": evaluate.config_hash(cfg, args.seed), "seed": args.seed}
    _write_json(payload, os.path.join(out, "ablation.json"))
    evaluate.emit_report(payload, "csv", os.path.join(out, "ablation.csv"))
    for row in rows:
        flag = "  <- recommended" if row["recommended"] else ""
        print(f"{row['taps']:12s} clean={row['clean_pct']:.2f}% fgsm={row['fgsm_pct']:.2f}% "
              f"bim={row['bim_pct']:.2f}%{flag}")
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    out = _out_dir(args)
    try:
        with open(args.infile, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"report input is not valid JSON: {exc}")
    name = os.path.splitext(os.path.basename(args.infile))[0] + ".csv"
    dest = os.path.join(out, name)
    evaluate.emit_report(payload, "csv", dest)
    print(f"wrote {dest}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shmrobust",
                                     description="Adversarial robustness harness for signal classifiers")
    parser.add_argument("--config", default=None, help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=0, help="run seed (u64)")
    parser.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic dataset as CSV")

    sub.add_parser("train", help="train a model per the config")

    p_attack = sub.add_parser("attack", help="generate adversarial examples against a model")
    p_attack.add_argument("--model", required=True)
    p_attack.add_argument("--family", default="pgd",
                          choices=["fgsm", "bim", "pgd", "cw_l2", "gaussian"])

    p_eval = sub.add_parser("eval", help="robustness report for one model")
    p_eval.add_argument("--model", required=True)

    p_tr = sub.add_parser("transfer", help="transfer matrix across models")
    p_tr.add_argument("--models", nargs="*", default=None)
    p_tr.add_argument("--family", default="fgsm", choices=["fgsm", "bim", "pgd", "cw_l2"])

    p_g = sub.add_parser("gauss", help="gaussian-noise accuracy sweep")
    p_g.add_argument("--model", required=True)

    sub.add_parser("ablate", help="circle-loss layer ablation (cnn preset)")

    p_rep = sub.add_parser("report", help="convert a JSON report to CSV")
    p_rep.add_argument("--infile", required=True)
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "gauss": cmd_gauss,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config) if args.config else cfgmod.load_config({})
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except defenses.DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, nets.CheckpointError, data.DataError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
