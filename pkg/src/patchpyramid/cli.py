"""Command-line driver.

Subcommands: synth, train, eval, ablate, gradcheck, predict,
export-attention.  Runs are configured by a flat ``key = value`` file
(``#`` comments allowed); ``--set key=value`` flags override file keys.
Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .attention import format_float
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    Dataset,
    SplitSpec,
    SynthSpec,
    load_csv,
    sliding_windows,
    synth_generate,
    write_csv,
    write_outlier_sidecar,
)
from .errors import ConfigError, DataError, DivergenceError, MetricUndefinedError
from .metrics import MetricsReport
from .model import (
    Model,
    ModelConfig,
    export_attention_scores,
    gradient_check_case,
    model_gradient_check,
)
from .training import AblationVariant, TrainSpec, evaluate, run_ablation, train, variant_config

GRADCHECK_TOLERANCE = 1e-3

DEFAULTS: dict[str, object] = {
    "data_path": "",
    "dataset_kind": "synth",
    "input_len": 96,
    "pred_len": 96,
    "stages": 3,
    "patch_size": 6,
    "embed_dim": 32,
    "dropout": 0.1,
    "batch_size": 16,
    "lr": 1e-4,
    "epochs": 10,
    "patience": 1,
    "seed": 0,
    "variant": "full",
    "n_seeds": 1,
    "split_train": 0.7,
    "split_val": 0.1,
    "split_test": 0.2,
    "periodicity_m": 0,
    "out_dir": "out",
    "synth.length": 1000,
    "synth.n_vars": 1,
    "synth.components": "1.0:24:0.0",
    "synth.trend": 0.0,
    "synth.noise": 0.1,
    "synth.outlier_rate": 0.0,
    "synth.outlier_magnitude": 0.0,
    "gradcheck.corrupt": False,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse value {raw!r}") from None


def parse_config(path: str | None, overrides: list[str] | None = None) -> dict:
    cfg = dict(DEFAULTS)
    entries: list[tuple[str, str]] = []
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        for ln, line in enumerate(lines, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{ln}: expected 'key = value', got {line.rstrip()!r}")
            key, value = stripped.split("=", 1)
            entries.append((key.strip(), value))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        entries.append((key.strip(), value))
    for key, value in entries:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value)
    return cfg


def parse_components(text: str) -> list[tuple[float, float, float]]:
    """'amp:period:phase,amp:period:phase' -> [(amp, period, phase), ...]"""
    out = []
    for part in text.split(","):
        fields = part.split(":")
        if len(fields) != 3:
            raise ConfigError(f"synth.components: expected amp:period:phase, got {part!r}")
        try:
            out.append((float(fields[0]), float(fields[1]), float(fields[2])))
        except ValueError:
            raise ConfigError(f"synth.components: cannot parse {part!r}") from None
    return out


def synth_spec_from(cfg: dict) -> SynthSpec:
    return SynthSpec(
        length=cfg["synth.length"],
        n_vars=cfg["synth.n_vars"],
        components=parse_components(cfg["synth.components"]),
        trend=cfg["synth.trend"],
        noise_std=cfg["synth.noise"],
        outlier_rate=cfg["synth.outlier_rate"],
        outlier_magnitude=cfg["synth.outlier_magnitude"],
        seed=cfg["seed"],
    )


def model_config_from(cfg: dict) -> ModelConfig:
    base = ModelConfig(
        input_len=cfg["input_len"],
        pred_len=cfg["pred_len"],
        stages=cfg["stages"],
        patch_size=cfg["patch_size"],
        embed_dim=cfg["embed_dim"],
        dropout=cfg["dropout"],
    )
    return variant_config(base, variant_from(cfg))


def variant_from(cfg: dict) -> AblationVariant:
    name = str(cfg["variant"]).lower()
    for v in AblationVariant:
        if v.value == name:
            return v
    raise ConfigError(
        f"unknown variant {cfg['variant']!r}; choose from "
        f"{[v.value for v in AblationVariant]}"
    )


def train_spec_from(cfg: dict) -> TrainSpec:
    return TrainSpec(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr0=cfg["lr"],
                     patience=cfg["patience"], seed=cfg["seed"])


def split_from(cfg: dict) -> SplitSpec:
    return SplitSpec(train=cfg["split_train"], val=cfg["split_val"], test=cfg["split_test"])


def periodicity_from(cfg: dict) -> int | None:
    m = cfg["periodicity_m"]
    return int(m) if m else None


def get_dataset(cfg: dict) -> Dataset:
    if cfg["dataset_kind"] == "synth":
        ds = synth_generate(synth_spec_from(cfg))
    elif cfg["dataset_kind"] == "csv":
        if not cfg["data_path"]:
            raise ConfigError("dataset_kind=csv needs data_path")
        ds = load_csv(cfg["data_path"])
    else:
        raise ConfigError(f"dataset_kind must be csv or synth, got {cfg['dataset_kind']!r}")
    ds.periodicity = periodicity_from(cfg)
    return ds


# -- machine-readable output helpers -----------------------------------------


def _json_render(value) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(float(value))
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_json_render(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_json_render(v) for v in value) + "]"
    raise TypeError(f"cannot render {type(value)} as JSON")


def write_json(path, value) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_json_render(value))
        fh.write("\n")


def metrics_payload(report: MetricsReport, cfg: dict, variant: str, seed: int) -> dict:
    return {
        "variant": variant,
        "seed": seed,
        "mse": report.mse,
        "mae": report.mae,
        "smape": report.smape,
        "mase": report.mase,
        "owa": report.owa,
        "n_windows": report.n_windows,
        "config": dict(cfg),
    }


def write_history_csv(path, history) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,lr,train_loss,val_loss\n")
        for rec in history:
            fh.write(f"{rec.epoch},{format_float(rec.lr)},"
                     f"{format_float(rec.train_loss)},{format_float(rec.val_loss)}\n")


# -- subcommands ---------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    ds = synth_generate(synth_spec_from(cfg))
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "dataset.csv")
    write_csv(ds, csv_path)
    write_outlier_sidecar(ds, os.path.join(out_dir, "outliers.txt"))
    print(f"wrote {csv_path}: {ds.length} rows, {ds.n_vars} variables, "
          f"{len(ds.outlier_patches)} outlier patches")
    return 0


def cmd_train(cfg: dict) -> int:
    ds = get_dataset(cfg)
    mcfg = model_config_from(cfg)
    spec = train_spec_from(cfg)
    splits = sliding_windows(ds, mcfg.input_len, mcfg.pred_len, split_from(cfg))
    model = Model(mcfg, seed=cfg["seed"])
    model, history = train(model, splits["train"], splits["val"], spec)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(model, os.path.join(out_dir, "checkpoint.bin"))
    write_history_csv(os.path.join(out_dir, "history.csv"), history)
    report = evaluate(model, splits["test"], m=ds.periodicity, label=cfg["variant"])
    write_json(os.path.join(out_dir, "metrics.json"),
               metrics_payload(report, cfg, cfg["variant"], cfg["seed"]))
    best_val = min((rec.val_loss for rec in history), default=float("nan"))
    print(f"final validation loss: {format_float(best_val)}")
    return 0


def cmd_eval(cfg: dict, checkpoint_path: str) -> int:
    model = load_checkpoint(checkpoint_path)
    ds = get_dataset(cfg)
    splits = sliding_windows(ds, model.config.input_len, model.config.pred_len, split_from(cfg))
    report = evaluate(model, splits["test"], m=ds.periodicity, label=cfg["variant"])
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "metrics.json")
    write_json(path, metrics_payload(report, cfg, cfg["variant"], cfg["seed"]))
    print(f"wrote {path}: mse={format_float(report.mse)} mae={format_float(report.mae)}")
    return 0


def cmd_ablate(cfg: dict) -> int:
    ds = get_dataset(cfg)
    base = ModelConfig(
        input_len=cfg["input_len"], pred_len=cfg["pred_len"], stages=cfg["stages"],
        patch_size=cfg["patch_size"], embed_dim=cfg["embed_dim"], dropout=cfg["dropout"],
    )
    spec = train_spec_from(cfg)
    n_seeds = cfg["n_seeds"]
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    payload = []
    for variant in AblationVariant:
        mean_report, seed_reports = run_ablation(variant, ds, base, spec,
                                                 n_seeds=n_seeds, split=split_from(cfg))
        payload.append({
            "variant": variant.value,
            "n_seeds": n_seeds,
            "seeds": [spec.seed + s for s in range(n_seeds)],
            "mse_per_seed": [r.mse for r in seed_reports],
            "mae_per_seed": [r.mae for r in seed_reports],
            "smape_per_seed": [r.smape for r in seed_reports],
            "mse": mean_report.mse,
            "mae": mean_report.mae,
            "smape": mean_report.smape,
            "mase": mean_report.mase,
            "owa": mean_report.owa,
            "n_windows": mean_report.n_windows,
        })
        rows.append((variant.value, mean_report))
        print(f"{variant.value}: mse={format_float(mean_report.mse)} "
              f"mae={format_float(mean_report.mae)}")
    write_json(os.path.join(out_dir, "ablation.json"), payload)
    with open(os.path.join(out_dir, "ablation_summary.csv"), "w", encoding="utf-8") as fh:
        header = "variant,mse,mae,smape,mase,owa,n_windows"
        if n_seeds > 1:
            header += ",seeds"
        fh.write(header + "\n")
        for name, rep in rows:
            line = (f"{name},{format_float(rep.mse)},{format_float(rep.mae)},"
                    f"{format_float(rep.smape)},"
                    f"{format_float(rep.mase) if rep.mase is not None else ''},"
                    f"{format_float(rep.owa) if rep.owa is not None else ''},"
                    f"{rep.n_windows}")
            if n_seeds > 1:
                line += "," + ";".join(str(spec.seed + s) for s in range(n_seeds))
            fh.write(line + "\n")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    mcfg = ModelConfig(input_len=24, pred_len=24, stages=2, patch_size=6,
                       embed_dim=4, dropout=0.0)
    model = Model(mcfg, seed=cfg["seed"])
    rng = np.random.default_rng(cfg["seed"])
    x, y = gradient_check_case(model, rng)
    result = model_gradient_check(model, x, y, corrupt=cfg["gradcheck.corrupt"])
    for name, err in result["groups"].items():
        print(f"{name}: max_rel_err={format_float(err)}")
    ok = result["worst"] < GRADCHECK_TOLERANCE
    print(f"worst: {format_float(result['worst'])} at {result['worst_name']} "
          f"-> {'PASS' if ok else 'FAIL'} (tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if ok else 4


def cmd_predict(cfg: dict, checkpoint_path: str, window_csv: str) -> int:
    model = load_checkpoint(checkpoint_path)
    window = load_csv(window_csv)
    length = model.config.input_len
    if window.length != length:
        raise DataError(
            f"{window_csv}: expected exactly {length} rows (input_len), got {window.length}"
        )
    from .data import revin_denormalize, revin_normalize

    preds = np.empty((model.config.pred_len, window.n_vars))
    from . import tensor as T

    with T.no_grad():
        for v in range(window.n_vars):
            norm, mean, std = revin_normalize(window.values[:, v])
            pred = model.forward(norm, training=False).data
            preds[:, v] = revin_denormalize(pred, mean, std)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "prediction.csv")
    write_csv(Dataset(values=preds, names=window.names), path)
    print(f"wrote {path}: {model.config.pred_len} rows, {window.n_vars} variables")
    return 0


def cmd_export_attention(cfg: dict, checkpoint_path: str, window_csv: str) -> int:
    model = load_checkpoint(checkpoint_path)
    window = load_csv(window_csv)
    length = model.config.input_len
    if window.length != length:
        raise DataError(
            f"{window_csv}: expected exactly {length} rows (input_len), got {window.length}"
        )
    from .data import revin_normalize

    norm, _, _ = revin_normalize(window.values[:, 0])
    out_dir = os.path.join(cfg["out_dir"], "attention")
    written = export_attention_scores(model, norm, out_dir)
    print(f"wrote {len(written)} score files to {out_dir}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="patchpyramid",
        description="Patch-pyramid forecaster: synthesize data, train, evaluate, ablate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    for name in ("synth", "train", "ablate", "gradcheck"):
        add_common(sub.add_parser(name))
    p_eval = sub.add_parser("eval")
    add_common(p_eval)
    p_eval.add_argument("checkpoint")
    p_pred = sub.add_parser("predict")
    add_common(p_pred)
    p_pred.add_argument("checkpoint")
    p_pred.add_argument("window_csv")
    p_exp = sub.add_parser("export-attention")
    add_common(p_exp)
    p_exp.add_argument("checkpoint")
    p_exp.add_argument("window_csv")

    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config, args.set)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "predict":
            return cmd_predict(cfg, args.checkpoint, args.window_csv)
        if args.command == "export-attention":
            return cmd_export_attention(cfg, args.checkpoint, args.window_csv)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (DivergenceError, MetricUndefinedError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
