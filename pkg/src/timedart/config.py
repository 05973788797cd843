"""Flat ``key=value`` run configuration shared by every CLI subcommand."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Union

from .data import SplitSpec
from .finetune import FinetuneConfig
from .pretrain import PretrainConfig, _fmt, _parse_value
from .synth import SynthSpec

SEED_ENV = "TIMEDART_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data_path: Optional[str] = None  # comma-separated list pools several files for pre-training
    columns: Optional[str] = None  # comma-separated names
    header: bool = True
    label_column: Optional[str] = None
    task: str = "forecast"  # forecast | classify
    split: str = "0.7,0.1,0.2"
    split_boundaries: Optional[str] = None  # "a:b,c:d,e:f"
    split_context: int = 0
    lookback: int = 336
    horizon: int = 96
    stride: int = 1
    # model
    patch_len: int = 8
    model_dim: int = 32
    encoder_layers: int = 2
    decoder_layers: int = 1
    heads: int = 8
    ff_dim: Optional[int] = None
    dropout: float = 0.0
    norm_first: bool = False
    # diffusion and ablations
    diffusion_steps: int = 1000
    scheduler: str = "cosine"
    step_mode: str = "independent"
    mask_ratio: float = 1.0
    no_ar: bool = False
    no_diff: bool = False
    # pre-training
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    grad_clip: float = 5.0
    loss_reduction: str = "mean"
    warmup_epochs: int = 0
    seed: int = 0
    # fine-tuning
    mode: str = "full"
    portion: float = 1.0
    finetune_epochs: int = 10
    finetune_lr: float = 1e-4
    keep_causal_mask: bool = True
    # outputs
    out_dir: str = "runs/default"
    loss_log: Optional[str] = None
    metric_log: Optional[str] = None
    dump_predictions: bool = False
    # synthetic corpora
    synth_kind: str = "sinusoid_mix"
    synth_length: int = 2000
    synth_channels: int = 1
    synth_noise_std: float = 0.1
    synth_frequencies: Optional[str] = None
    synth_amplitudes: Optional[str] = None
    synth_ar_coefs: Optional[str] = None
    synth_num_classes: int = 3
    synth_window: int = 64
    synth_output: Optional[str] = None

    @property
    def data_paths(self) -> list[str]:
        return [p.strip() for p in (self.data_path or "").split(",") if p.strip()]

    def pretrain_config(self) -> PretrainConfig:
        keys = {f.name for f in fields(PretrainConfig)}
        return PretrainConfig(**{k: getattr(self, k) for k in keys})

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(
            mode=self.mode,
            portion=self.portion,
            epochs=self.finetune_epochs,
            learning_rate=self.finetune_lr,
            batch_size=self.batch_size,
            keep_causal_mask=self.keep_causal_mask,
            grad_clip=self.grad_clip,
            seed=self.seed,
        )

    def split_spec(self) -> SplitSpec:
        if self.split_boundaries:
            bounds = []
            for part in self.split_boundaries.split(","):
                a, b = part.split(":")
                bounds.append((int(a), int(b)))
            return SplitSpec(boundaries=bounds, context=self.split_context)
        tr, va, te = (float(v) for v in self.split.split(","))
        return SplitSpec(tr, va, te, context=self.split_context)

    def synth_spec(self) -> SynthSpec:
        spec = SynthSpec(
            kind=self.synth_kind,
            length=self.synth_length,
            channels=self.synth_channels,
            noise_std=self.synth_noise_std,
            seed=self.seed,
            num_classes=self.synth_num_classes,
            window=self.synth_window,
        )
        if self.synth_frequencies:
            spec.frequencies = _floats(self.synth_frequencies)
        if self.synth_amplitudes:
            spec.amplitudes = _floats(self.synth_amplitudes)
        spec.phases = [0.0] * len(spec.frequencies)
        if self.synth_ar_coefs:
            spec.ar_coefs = _floats(self.synth_ar_coefs)
        return spec

    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def parse_config(text: str, base_dir: Union[str, Path, None] = None) -> RunConfig:
    """Parse ``key=value`` lines (``#`` starts a comment); unknown keys are errors."""
    known = {f.name: f for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = (s.strip() for s in line.partition("="))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(value, known[key].type)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    if SEED_ENV in os.environ:
        try:
            values["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    cfg = RunConfig(**values)
    if base_dir is not None:
        if cfg.data_path:
            cfg.data_path = ",".join(
                p if Path(p).is_absolute() else str(Path(base_dir) / p) for p in cfg.data_paths
            )
    return cfg


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)


def validate(cfg: RunConfig, need_data: bool = True) -> None:
    if need_data:
        if not cfg.data_path:
            raise ConfigError("missing required key 'data_path'")
        for p in cfg.data_paths:
            if not Path(p).is_file():
                raise ConfigError(f"data_path does not exist: {p}")
    if cfg.task not in ("forecast", "classify"):
        raise ConfigError(f"task must be 'forecast' or 'classify', got {cfg.task!r}")
    if cfg.task == "classify" and need_data and not cfg.label_column:
        raise ConfigError("classification needs 'label_column'")
    if cfg.lookback % cfg.patch_len:
        raise ConfigError(f"lookback {cfg.lookback} is not divisible by patch_len {cfg.patch_len}")
    if cfg.scheduler not in ("cosine", "linear"):
        raise ConfigError(f"unknown scheduler {cfg.scheduler!r}")
    if cfg.step_mode not in ("independent", "same"):
        raise ConfigError(f"unknown step_mode {cfg.step_mode!r}")
    try:
        cfg.pretrain_config()
        cfg.finetune_config()
        cfg.split_spec()
        cfg.pretrain_config().model_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
