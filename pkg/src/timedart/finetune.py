"""Downstream transfer: flatten forecasting head, max-pool classification head, metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import NormStats, denormalize, instance_normalize
from .model import MaskSpec, TimeDART, _init_affine, build_mask
from .patching import patchify
from .pretrain import Checkpoint, PretrainConfig, model_from_checkpoint
from .rng import numpy_stream, substream_seed

log = logging.getLogger(__name__)

BACKBONE_PREFIXES = ("embedding.", "encoder.")


class IncompatibleCheckpoint(ValueError):
    pass


@dataclass
class FinetuneConfig:
    mode: str = "full"  # "full" or "linear_probe"
    portion: float = 1.0
    epochs: int = 10
    learning_rate: float = 1e-4
    batch_size: int = 16
    keep_causal_mask: bool = True
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("full", "linear_probe"):
            raise ValueError(f"unknown fine-tuning mode {self.mode!r}")
        if not 0.0 < self.portion <= 1.0:
            raise ValueError(f"portion must lie in (0, 1], got {self.portion}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


class ForecastHead(nn.Module):
    def __init__(self, num_patches: int, model_dim: int, horizon: int):
        super().__init__()
        self.linear = nn.Linear(num_patches * model_dim, horizon)
        _init_affine(self.linear)

    def forward(self, z):
        return self.linear(z.flatten(-2))


class ClassifyHead(nn.Module):
    def __init__(self, model_dim: int, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"need at least two classes, got {num_classes}")
        self.linear = nn.Linear(model_dim, num_classes)
        _init_affine(self.linear)

    def forward(self, pooled):
        return self.linear(pooled)


class _Downstream(nn.Module):
    def __init__(self, backbone: TimeDART, keep_causal_mask: bool = True):
        super().__init__()
        self.backbone = backbone
        self.keep_causal_mask = keep_causal_mask

    def _seeded_head(self, factory, seed: int):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(substream_seed(seed, "head"))
            return factory().to(self.backbone.sos.dtype)

    @property
    def patch_len(self) -> int:
        return self.backbone.config.patch_len

    def encode_channels(self, x: torch.Tensor) -> torch.Tensor:
        """``[B, C, L]`` normalized input to per-channel encodings ``[B, C, N, D]`` (no SOS shift)."""
        B, C, L = x.shape
        patches = patchify(x.reshape(B * C, L), self.patch_len).patches
        N = patches.shape[-2]
        mask = build_mask(MaskSpec("causal"), N) if self.keep_causal_mask else None
        z = self.backbone.encode(patches, mask, shift=False)
        return z.reshape(B, C, N, -1)

    def backbone_parameters(self):
        return [p for n, p in self.backbone.named_parameters() if n.startswith(BACKBONE_PREFIXES)]


class Forecaster(_Downstream):
    def __init__(self, backbone: TimeDART, lookback: int, horizon: int, keep_causal_mask: bool = True, seed: int = 0):
        super().__init__(backbone, keep_causal_mask)
        N = lookback // backbone.config.patch_len
        self.head = self._seeded_head(lambda: ForecastHead(N, backbone.config.model_dim, horizon), seed)
        self.lookback, self.horizon = lookback, horizon

    def forward(self, x):
        return self.head(self.encode_channels(x))


class Classifier(_Downstream):
    def __init__(self, backbone: TimeDART, num_classes: int, keep_causal_mask: bool = True, seed: int = 0):
        super().__init__(backbone, keep_causal_mask)
        self.head = self._seeded_head(lambda: ClassifyHead(backbone.config.model_dim, num_classes), seed)

    def pool(self, x):
        # joint max over channels and positions
        z = self.encode_channels(x)
        return z.amax(dim=(1, 2))

    def forward(self, x):
        return self.head(self.pool(x))


def forecast_forward(lookback: np.ndarray, model: Forecaster) -> np.ndarray:
    """Raw ``[C, L]`` lookback to a denormalized ``[C, H]`` forecast."""
    x, stats = instance_normalize(lookback)
    model.eval()
    with torch.no_grad():
        dtype = next(model.parameters()).dtype
        y = model(torch.as_tensor(x[None], dtype=dtype))[0].double().numpy()
    return denormalize(y, stats)


def classify_forward(window: np.ndarray, model: Classifier) -> np.ndarray:
    x, _ = instance_normalize(window)
    model.eval()
    with torch.no_grad():
        dtype = next(model.parameters()).dtype
        return model(torch.as_tensor(x[None], dtype=dtype))[0].double().numpy()


def few_shot_count(portion: float, n: int) -> int:
    return int(math.ceil(portion * n - 1e-9))


def few_shot_subset(data, portion: float):
    """Chronological prefix holding ``ceil(portion * len)`` items."""
    k = few_shot_count(portion, len(data))
    if k < 1:
        raise ValueError(f"few-shot subset is empty (portion={portion}, n={len(data)})")
    return data[:k]


@dataclass
class ForecastData:
    """Normalized arrays for forecasting plus the stats to undo normalization.

    ``x`` is ``[B, C, L]``, ``y`` is ``[B, C, H]``, both scaled with the lookback's stats.
    """

    x: np.ndarray
    y: np.ndarray
    stats: NormStats
    raw_y: np.ndarray

    @classmethod
    def from_arrays(cls, lookbacks: np.ndarray, horizons: np.ndarray) -> "ForecastData":
        x, stats = instance_normalize(lookbacks)
        y = (horizons - stats.mean[..., None]) / stats.std[..., None]
        return cls(x, y, stats, np.asarray(horizons, dtype=np.float64))

    def __len__(self):
        return len(self.x)

    def head(self, k: int) -> "ForecastData":
        return ForecastData(self.x[:k], self.y[:k], NormStats(self.stats.mean[:k], self.stats.std[:k]), self.raw_y[:k])


@dataclass
class ClassifyData:
    x: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_arrays(cls, windows: np.ndarray, labels: np.ndarray) -> "ClassifyData":
        return cls(instance_normalize(windows)[0], np.asarray(labels, dtype=np.int64))

    def __len__(self):
        return len(self.x)

    def head(self, k: int) -> "ClassifyData":
        return ClassifyData(self.x[:k], self.labels[:k])


def check_compatible(ckpt_config: PretrainConfig, patch_len: Optional[int], model_dim: Optional[int]) -> None:
    if patch_len is not None and ckpt_config.patch_len != patch_len:
        raise IncompatibleCheckpoint(f"checkpoint patch_len={ckpt_config.patch_len}, config wants {patch_len}")
    if model_dim is not None and ckpt_config.model_dim != model_dim:
        raise IncompatibleCheckpoint(f"checkpoint model_dim={ckpt_config.model_dim}, config wants {model_dim}")


def backbone_from(
    checkpoint: Optional[Checkpoint],
    pretrain_config: Optional[PretrainConfig] = None,
    random_init: bool = False,
    seed: int = 0,
) -> TimeDART:
    """Backbone with pre-trained weights, or a fresh one of the same shape when ``random_init``."""
    if checkpoint is not None:
        cfg = PretrainConfig.from_strings(checkpoint.config)
    elif pretrain_config is not None:
        cfg = pretrain_config
    else:
        raise ValueError("need a checkpoint or a pretrain config")
    if checkpoint is not None and not random_init:
        return model_from_checkpoint(checkpoint)[0]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(substream_seed(seed, "random-init"))
        return TimeDART(cfg.model_config())


@dataclass
class FinetuneResult:
    model: nn.Module
    losses: list[float]
    train_count: int
    metrics: list[tuple[int, str, str, float]] = field(default_factory=list)


def finetune(
    data: Union[ForecastData, ClassifyData],
    model: Union[Forecaster, Classifier],
    config: FinetuneConfig,
    val: Union[ForecastData, ClassifyData, None] = None,
) -> FinetuneResult:
    """Train a downstream model in place: MSE for forecasting, cross-entropy for classification."""
    task = "forecast" if isinstance(model, Forecaster) else "classify"
    data = data.head(few_shot_count(config.portion, len(data)))
    if len(data) == 0:
        raise ValueError("few-shot subset is empty")
    if config.mode == "linear_probe":
        for p in model.backbone.parameters():
            p.requires_grad_(False)
        params = list(model.head.parameters())
    else:
        params = list(model.head.parameters()) + model.backbone_parameters()
    opt = torch.optim.Adam(params, lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8, foreach=True)
    dtype = next(model.parameters()).dtype
    x_all = torch.as_tensor(data.x, dtype=dtype)
    y_all = torch.as_tensor(data.y, dtype=dtype) if task == "forecast" else torch.as_tensor(data.labels)
    losses, metrics = [], []
    for epoch in range(1, config.epochs + 1):
        order = numpy_stream(config.seed, "finetune-shuffle", epoch).permutation(len(data))
        model.train()
        if config.mode == "linear_probe":
            model.backbone.eval()
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size])
            out = model(x_all[idx])
            if task == "forecast":
                loss = F.mse_loss(out, y_all[idx])
            else:
                loss = F.cross_entropy(out, y_all[idx])
            opt.zero_grad()
            loss.backward()
            if config.grad_clip and config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(data))
        metrics.append((epoch, "train", "loss", losses[-1]))
        if val is not None and len(val):
            scores = evaluate(model, val)
            metrics += [(epoch, "val", k, v) for k, v in scores.items()]
        log.info("finetune epoch %d loss %.6f", epoch, losses[-1])
    return FinetuneResult(model, losses, len(data), metrics)


def predict_forecast(model: Forecaster, data: ForecastData, batch_size: int = 256) -> np.ndarray:
    """Denormalized predictions ``[B, C, H]``."""
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = []
    with torch.no_grad():
        for s in range(0, len(data), batch_size):
            outs.append(model(torch.as_tensor(data.x[s:s + batch_size], dtype=dtype)).double().numpy())
    return denormalize(np.concatenate(outs), data.stats)


def predict_logits(model: Classifier, data: ClassifyData, batch_size: int = 256) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = []
    with torch.no_grad():
        for s in range(0, len(data), batch_size):
            outs.append(model(torch.as_tensor(data.x[s:s + batch_size], dtype=dtype)).double().numpy())
    return np.concatenate(outs)


def evaluate(model, data) -> dict[str, float]:
    if isinstance(model, Forecaster):
        return evaluate_forecast(predict_forecast(model, data), data.raw_y)
    return evaluate_classify(predict_logits(model, data), data.labels)


def evaluate_forecast(predictions: np.ndarray, targets: np.ndarray) -> dict[str, float]:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ValueError(f"shape mismatch: predictions {predictions.shape} vs targets {targets.shape}")
    err = predictions - targets
    return {"MSE": float(np.mean(err ** 2)), "MAE": float(np.mean(np.abs(err)))}


def per_horizon_forecast(predictions: np.ndarray, targets: np.ndarray) -> list[dict[str, float]]:
    """Metrics for each horizon step (last axis)."""
    return [evaluate_forecast(predictions[..., h], targets[..., h]) for h in range(predictions.shape[-1])]


def evaluate_classify(logits: np.ndarray, labels: np.ndarray, num_classes: Optional[int] = None) -> dict[str, float]:
    """Accuracy and macro-F1; a class with no support and no predictions scores F1 = 0."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty set")
    if logits.ndim == 1:
        preds = logits.astype(np.int64)
        k = num_classes or int(max(preds.max(), labels.max())) + 1
    else:
        preds = logits.argmax(axis=-1)
        k = num_classes or logits.shape[-1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels outside [0, {k})")
    f1s = []
    for c in range(k):
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return {"accuracy": float(np.mean(preds == labels)), "macro_F1": float(np.mean(f1s))}


def write_metric_log(path: Union[str, Path], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,split,metric,value"] + [f"{e},{s},{m},{v!r}" for e, s, m, v in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_predictions(path: Union[str, Path], predictions: np.ndarray, targets: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    B, C, H = predictions.shape
    with path.open("w", encoding="utf-8") as fh:
        fh.write("window_id,channel,step,prediction,target\n")
        for b in range(B):
            for c in range(C):
                for h in range(H):
                    fh.write(f"{b},{c},{h},{predictions[b, c, h]!r},{targets[b, c, h]!r}\n")
