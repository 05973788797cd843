"""Command-line entry point: ``timedart {pretrain,finetune,evaluate,ablate,synth}``.

Exit codes: 0 success, 2 invalid config or data, 3 pre-training diverged,
4 incompatible checkpoint.
"""
from __future__ import annotations

import argparse
import logging
import subprocess
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, load_config, validate
from .data import DataError, MultivariateSeries, instance_normalize, load_csv, make_windows, split_series, stack_windows, write_csv
from .finetune import (
    ClassifyData,
    Classifier,
    ForecastData,
    Forecaster,
    IncompatibleCheckpoint,
    backbone_from,
    check_compatible,
    evaluate,
    evaluate_forecast,
    finetune,
    per_horizon_forecast,
    predict_forecast,
    predict_logits,
    evaluate_classify,
    write_metric_log,
    write_predictions,
)
from .pretrain import (
    Checkpoint,
    CheckpointError,
    DivergenceError,
    PretrainConfig,
    apply_ablation,
    describe_ablation,
    load_checkpoint,
    pretrain_loop,
    save_checkpoint,
)
from .synth import generate

log = logging.getLogger("timedart")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INCOMPATIBLE = 0, 2, 3, 4


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out: Path, cfg: RunConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = f"# command={command}\n# version={version_string()}\n# seed={cfg.seed}\n" + cfg.to_text()
    (out / "manifest.txt").write_text(text, encoding="utf-8")


# data plumbing ------------------------------------------------------------

def _load_parts(cfg: RunConfig, path: Optional[str] = None):
    path = path or cfg.data_paths[0]
    columns = [c.strip() for c in cfg.columns.split(",")] if cfg.columns else None
    labels = None
    if cfg.task == "classify":
        lab = load_csv(path, columns=[cfg.label_column], header=cfg.header)
        labels = lab.values[0].astype(np.int64)
        if columns is None:
            full = load_csv(path, header=cfg.header)
            columns = [n for n in full.channel_names if n != cfg.label_column]
    series = load_csv(path, columns=columns, header=cfg.header)
    need = cfg.lookback + (cfg.horizon if cfg.task == "forecast" else 0)
    parts = split_series(series, cfg.split_spec(), min_length=need)
    if labels is None:
        return parts, [None, None, None]
    spec = cfg.split_spec()
    # labels follow the same split as values
    lab_parts = split_series(MultivariateSeries(labels[None].astype(float)), spec, min_length=need)
    return parts, [p.values[0].astype(np.int64) for p in lab_parts]


def pretrain_array(cfg: RunConfig) -> np.ndarray:
    """Normalized univariate train-split lookbacks, pooled over every data file."""
    pooled = []
    for path in cfg.data_paths:
        parts, _ = _load_parts(cfg, path)
        x = stack_windows(make_windows(parts[0], cfg.lookback, 0, cfg.stride))[0]
        pooled.append(instance_normalize(x)[0].reshape(-1, cfg.lookback))
    return np.concatenate(pooled)


def downstream_data(cfg: RunConfig):
    parts, labels = _load_parts(cfg)
    out = []
    for part, lab in zip(parts, labels):
        if cfg.task == "forecast":
            x, y, _ = stack_windows(make_windows(part, cfg.lookback, cfg.horizon, cfg.stride))
            out.append(ForecastData.from_arrays(x, y))
        else:
            wins = make_windows(part, cfg.lookback, 0, cfg.lookback, labels=lab)
            x, _, lab_w = stack_windows(wins)
            out.append(ClassifyData.from_arrays(x, lab_w))
    return out


def _num_classes(cfg: RunConfig, data) -> int:
    return max(2, int(max(int(d.labels.max()) for d in data if len(d)) + 1))


def build_downstream(cfg: RunConfig, backbone, num_classes: Optional[int] = None):
    if cfg.task == "forecast":
        return Forecaster(backbone, cfg.lookback, cfg.horizon, cfg.keep_causal_mask, seed=cfg.seed)
    return Classifier(backbone, num_classes, cfg.keep_causal_mask, seed=cfg.seed)


# subcommands --------------------------------------------------------------

def cmd_pretrain(cfg: RunConfig, out: Path) -> int:
    validate(cfg)
    write_manifest(out, cfg, "pretrain")
    pcfg = cfg.pretrain_config()
    data = pretrain_array(cfg)
    loss_log = Path(cfg.loss_log) if cfg.loss_log else out / "loss.csv"
    log.info("pre-training on %d instances (%s)", len(data), describe_ablation(apply_ablation(pcfg)))
    try:
        result = pretrain_loop(data, pcfg, loss_log=loss_log)
    except DivergenceError as exc:
        log.error("diverged: %s", exc)
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out / "checkpoint.tdrt")
        return EXIT_DIVERGED
    save_checkpoint(result.checkpoint, out / "checkpoint.tdrt")
    return EXIT_OK


def _downstream_checkpoint(model, cfg: RunConfig, base: dict, epoch: int, num_classes: Optional[int]) -> Checkpoint:
    meta = dict(base)
    meta.update({
        "task": cfg.task,
        "lookback": str(cfg.lookback),
        "horizon": str(cfg.horizon),
        "keep_causal_mask": "true" if cfg.keep_causal_mask else "false",
        "num_classes": str(num_classes or 0),
    })
    return Checkpoint.from_model(model, meta, epoch, cfg.seed)


def cmd_finetune(cfg: RunConfig, out: Path, checkpoint: Optional[str], random_init: bool = False) -> int:
    validate(cfg)
    write_manifest(out, cfg, "finetune" + (" --random-init" if random_init else ""))
    if checkpoint:
        ckpt = load_checkpoint(checkpoint)
        try:
            check_compatible(PretrainConfig.from_strings(ckpt.config), cfg.patch_len, cfg.model_dim)
        except IncompatibleCheckpoint as exc:
            log.error("%s", exc)
            return EXIT_INCOMPATIBLE
        base_cfg = ckpt.config
    else:
        ckpt = None
        random_init = True
        base_cfg = cfg.pretrain_config().to_strings()
    backbone = backbone_from(ckpt, cfg.pretrain_config(), random_init=random_init, seed=cfg.seed)
    train, val, _ = downstream_data(cfg)
    k = _num_classes(cfg, [train, val]) if cfg.task == "classify" else None
    model = build_downstream(cfg, backbone, k)
    fcfg = cfg.finetune_config()
    result = finetune(train, model, fcfg, val=val)
    log.info("fine-tuned on %d windows", result.train_count)
    rows = [(0, "train", "count", float(result.train_count))] + result.metrics
    write_metric_log(Path(cfg.metric_log) if cfg.metric_log else out / "metrics.csv", rows)
    save_checkpoint(_downstream_checkpoint(model, cfg, base_cfg, fcfg.epochs, k), out / "finetuned.tdrt")
    return EXIT_OK


def load_downstream(path: str):
    ckpt = load_checkpoint(path)
    meta = dict(ckpt.config)
    task = meta.pop("task", None)
    if task is None:
        raise IncompatibleCheckpoint(f"{path} is a pre-training checkpoint, not a fine-tuned one")
    lookback, horizon = int(meta.pop("lookback")), int(meta.pop("horizon"))
    keep = meta.pop("keep_causal_mask") == "true"
    k = int(meta.pop("num_classes"))
    pcfg = PretrainConfig.from_strings(meta)
    from .model import TimeDART

    backbone = TimeDART(pcfg.model_config())
    if task == "forecast":
        model = Forecaster(backbone, lookback, horizon, keep)
    else:
        model = Classifier(backbone, k, keep)
    ckpt.load_into(model)
    return model, ckpt, task


def cmd_evaluate(
    cfg: RunConfig,
    out: Path,
    checkpoint: str,
    predictor: Optional[Callable] = None,
) -> int:
    """Test-split metrics. ``predictor(data) -> predictions`` replaces the model when given."""
    validate(cfg)
    write_manifest(out, cfg, "evaluate")
    model, ckpt, task = load_downstream(checkpoint)
    if task != cfg.task:
        raise IncompatibleCheckpoint(f"checkpoint task {task!r} != config task {cfg.task!r}")
    check_compatible(PretrainConfig.from_strings({k: v for k, v in ckpt.config.items()}), cfg.patch_len, cfg.model_dim)
    _, _, test = downstream_data(cfg)
    if len(test) == 0:
        raise DataError("test split is empty")
    epoch = ckpt.epoch
    rows = []
    if task == "forecast":
        pred = predictor(test) if predictor else predict_forecast(model, test)
        for h, m in enumerate(per_horizon_forecast(pred, test.raw_y), start=1):
            rows += [(epoch, "test", f"MSE@{h}", m["MSE"]), (epoch, "test", f"MAE@{h}", m["MAE"])]
        avg = evaluate_forecast(pred, test.raw_y)
        rows += [(epoch, "test", "MSE", avg["MSE"]), (epoch, "test", "MAE", avg["MAE"])]
        if cfg.dump_predictions:
            write_predictions(out / "predictions.csv", pred, test.raw_y)
    else:
        logits = predictor(test) if predictor else predict_logits(model, test)
        scores = evaluate_classify(logits, test.labels, num_classes=np.shape(logits)[-1])
        rows += [(epoch, "test", k, v) for k, v in scores.items()]
    write_metric_log(Path(cfg.metric_log) if cfg.metric_log else out / "test_metrics.csv", rows)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    """Pre-train, fine-tune and test the four settings; summary in ``ablation.csv``."""
    validate(cfg)
    write_manifest(out, cfg, "ablate")
    settings = {
        "full": (False, False),
        "no_ar": (True, False),
        "no_diff": (False, True),
        "no_ar_no_diff": (True, True),
    }
    lines = ["setting,encoder_mask,decoder_mask,loss,MSE,MAE"]
    for name, (no_ar, no_diff) in settings.items():
        sub = replace(cfg, no_ar=no_ar, no_diff=no_diff, loss_log=None, metric_log=None)
        code = cmd_pretrain(sub, out / name)
        if code:
            return code
        cmd_finetune(sub, out / name, str(out / name / "checkpoint.tdrt"))
        model, _, _ = load_downstream(str(out / name / "finetuned.tdrt"))
        _, _, test = downstream_data(sub)
        scores = evaluate(model, test)
        ab = apply_ablation(sub.pretrain_config())
        dec = ab.decoder_mask.kind if ab.decoder_mask else "-"
        vals = ",".join(repr(v) for v in scores.values())
        lines.append(f"{name},{ab.encoder_mask.kind},{dec},{ab.loss},{vals}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    validate(cfg, need_data=False)
    write_manifest(out, cfg, "synth")
    series, labels = generate(cfg.synth_spec())
    target = Path(cfg.synth_output) if cfg.synth_output else out / f"{cfg.synth_kind}.csv"
    write_csv(series, target, labels)
    log.info("wrote %s (%d channels x %d steps)", target, series.num_channels, series.length)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="timedart", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=version_string())
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "finetune", "evaluate", "ablate", "synth"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="key=value config file")
        s.add_argument("--out", help="output directory (overrides out_dir)")
        s.add_argument("--threads", type=int, default=None, help="torch intra-op threads; 1 is deterministic")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("finetune", "evaluate"):
            s.add_argument("--checkpoint", required=(name == "evaluate"))
        if name == "finetune":
            s.add_argument("--random-init", action="store_true", help="ignore checkpoint weights, keep its shape")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        cfg = load_config(args.config)
        out = Path(args.out or cfg.out_dir)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, out)
        if args.command == "finetune":
            return cmd_finetune(cfg, out, args.checkpoint, args.random_init)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out, args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(cfg, out)
        return cmd_synth(cfg, out)
    except IncompatibleCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (ConfigError, DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
