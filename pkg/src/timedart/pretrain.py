"""Self-supervised pre-training: diffusion loss, ablations, optimizer loop and checkpoints."""
from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .diffusion import NoiseSchedule, add_noise, build_schedule, draw_steps
from .model import MaskSpec, ModelConfig, NonFiniteError, TimeDART, build_mask, gradient
from .patching import patchify
from .rng import numpy_stream, substream_seed, torch_stream

log = logging.getLogger(__name__)

MAGIC = b"TDRT"
FORMAT_VERSION = 1


@dataclass
class PretrainConfig:
    patch_len: int = 8
    model_dim: int = 32
    encoder_layers: int = 2
    decoder_layers: int = 1
    heads: int = 8
    ff_dim: Optional[int] = None
    dropout: float = 0.0
    norm_first: bool = False
    diffusion_steps: int = 1000
    scheduler: str = "cosine"
    step_mode: str = "independent"
    mask_ratio: float = 1.0
    no_ar: bool = False
    no_diff: bool = False
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    grad_clip: float = 5.0
    loss_reduction: str = "mean"  # mean | sum over batch, patches and elements
    warmup_epochs: int = 0  # linear learning-rate ramp
    seed: int = 0

    def __post_init__(self):
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError(f"loss_reduction must be 'mean' or 'sum', got {self.loss_reduction!r}")
        if self.warmup_epochs < 0:
            raise ValueError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            patch_len=self.patch_len,
            model_dim=self.model_dim,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            heads=self.heads,
            ff_dim=self.ff_dim,
            dropout=self.dropout,
            norm_first=self.norm_first,
        )

    def to_strings(self) -> dict[str, str]:
        return {k: _fmt(v) for k, v in asdict(self).items()}

    @classmethod
    def from_strings(cls, items: dict[str, str]) -> "PretrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in items:
                kwargs[f.name] = _parse_value(items[f.name], f.type)
        return cls(**kwargs)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, typ):
    typ = str(typ)
    t = text.strip()
    if "bool" in typ:
        if t.lower() in ("true", "1", "yes"):
            return True
        if t.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if "Optional" in typ and t.lower() == "none":
        return None
    if "int" in typ:
        return int(t)
    if "float" in typ:
        return float(t)
    return t


@dataclass(frozen=True)
class Ablation:
    encoder_mask: MaskSpec
    decoder_mask: Optional[MaskSpec]
    loss: str  # "diff" or "mse"


def apply_ablation(config: PretrainConfig) -> Ablation:
    """Effective masks and loss for the four settings (full, w/o AR, w/o Diff, w/o AR-Diff)."""
    enc = MaskSpec("none") if config.no_ar else MaskSpec("causal")
    if config.no_diff or config.decoder_layers == 0:
        return Ablation(enc, None, "mse")
    dec = MaskSpec("none") if config.no_ar else MaskSpec.from_ratio(config.mask_ratio)
    return Ablation(enc, dec, "diff")


def describe_ablation(ab: Ablation) -> str:
    dec = ab.decoder_mask.kind if ab.decoder_mask is not None else "-"
    return f"encoder_mask={ab.encoder_mask.kind} decoder_mask={dec} loss={ab.loss}"


def build_model(config: PretrainConfig) -> TimeDART:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(substream_seed(config.seed, "init"))
        return TimeDART(config.model_config())


def reconstruct(
    model: TimeDART,
    x: torch.Tensor,
    config: PretrainConfig,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    steps: Optional[torch.Tensor] = None,
    eps: Optional[torch.Tensor] = None,
):
    """Run the pre-training pipeline on normalized univariate windows ``[B, L]``.

    Returns ``(prediction, clean_patches)``, both ``[B, N, P]``. ``steps``
    (``[B, N]``) and ``eps`` (``[B, N, P]``) override the sampled ones.
    """
    ab = apply_ablation(config)
    patches = patchify(x, config.patch_len).patches
    N = patches.shape[-2]
    enc_mask = build_mask(ab.encoder_mask, N, generator)
    enc = model.encode(patches, enc_mask, shift=True)
    if ab.loss == "mse":
        return model.project(enc), patches
    if steps is None:
        steps = draw_steps(tuple(patches.shape[:-1]), config.step_mode, schedule.total_steps, generator)
    if eps is None:
        eps = torch.randn(patches.shape, generator=generator, dtype=patches.dtype)
    noisy = add_noise(patches, steps, schedule, eps)
    dec_mask = build_mask(ab.decoder_mask, N, generator)
    out = model.run_decoder(model.noisy_input(noisy), enc, dec_mask)
    return model.project(out), patches


def pretrain_loss(model, x, config, schedule, generator) -> torch.Tensor:
    pred, clean = reconstruct(model, x, config, schedule, generator)
    sq = (pred - clean) ** 2
    return sq.sum() if config.loss_reduction == "sum" else sq.mean()


def pretrain_step(model, x, config, schedule=None, generator=None):
    """One loss evaluation with gradients: ``(loss, {name: grad})``."""
    schedule = schedule or build_schedule(config.scheduler, config.diffusion_steps)
    generator = generator or torch_stream(config.seed, "noise")
    box = {}

    def closure():
        box["loss"] = pretrain_loss(model, x, config, schedule, generator)
        return box["loss"]

    grads = gradient(model, closure)
    return float(box["loss"].detach()), grads


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict[str, str] = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0

    @classmethod
    def from_model(cls, model: torch.nn.Module, config: dict[str, str], epoch: int, seed: int) -> "Checkpoint":
        params = {k: v.detach().cpu().numpy().astype(np.float32).copy() for k, v in model.state_dict().items()}
        return cls(params, dict(config), epoch, seed)

    def load_into(self, model: torch.nn.Module, strict: bool = True) -> None:
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        model.load_state_dict(state, strict=strict)


class CheckpointError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message: str, checkpoint: Optional[Checkpoint], losses: list[float]):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.losses = losses


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    meta = dict(ckpt.config)
    meta["checkpoint.epoch"] = str(ckpt.epoch)
    meta["checkpoint.seed"] = str(ckpt.seed)
    block = "".join(f"{k}={meta[k]}\n" for k in sorted(meta)).encode("utf-8")
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {pos}, have {len(view) - pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic; not a TDRT checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (block_len,) = struct.unpack("<I", take(4))
    meta = {}
    for line in bytes(take(block_len)).decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        meta[k] = v
    epoch = int(meta.pop("checkpoint.epoch", 0))
    seed = int(meta.pop("checkpoint.seed", 0))
    params = {}
    while pos < len(view):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(bytes(take(4 * count)), dtype="<f4").reshape(shape).astype(np.float32)
    return Checkpoint(params, meta, epoch, seed)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[TimeDART, PretrainConfig]:
    config = PretrainConfig.from_strings(ckpt.config)
    model = TimeDART(config.model_config())
    ckpt.load_into(model)
    return model, config


@dataclass
class PretrainResult:
    model: TimeDART
    checkpoint: Checkpoint
    losses: list[float]
    ablation: Ablation


def pretrain_loop(
    data: np.ndarray,
    config: PretrainConfig,
    model: Optional[TimeDART] = None,
    loss_log: Optional[Union[str, Path]] = None,
) -> PretrainResult:
    """Adam over shuffled mini-batches of normalized univariate windows ``[M, L]``.

    Per-epoch randomness is derived from ``(seed, epoch)`` so runs are
    reproducible. A non-finite loss raises :class:`DivergenceError` carrying
    the checkpoint from the last completed epoch.
    """
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3:
        data = data.reshape(-1, data.shape[-1])
    if len(data) == 0:
        raise ValueError("pre-training dataset is empty")
    if data.shape[-1] % config.patch_len:
        raise ValueError(f"window length {data.shape[-1]} not divisible by patch_len {config.patch_len}")
    model = model if model is not None else build_model(config)
    schedule = build_schedule(config.scheduler, config.diffusion_steps)
    ablation = apply_ablation(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8, foreach=True)
    x_all = torch.from_numpy(data)
    losses: list[float] = []
    last_good = Checkpoint.from_model(model, config.to_strings(), 0, config.seed)

    for epoch in range(1, config.epochs + 1):
        order = numpy_stream(config.seed, "shuffle", epoch).permutation(len(data))
        gen = torch_stream(config.seed, "noise", epoch)
        for group in opt.param_groups:
            group["lr"] = config.learning_rate * min(1.0, epoch / (config.warmup_epochs + 1))
        model.train()
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size])
            xb = x_all[idx]
            try:
                loss = pretrain_loss(model, xb, config, schedule, gen)
            except NonFiniteError as exc:
                raise DivergenceError(str(exc), last_good, losses) from exc
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", last_good, losses)
            opt.zero_grad()
            loss.backward()
            if config.grad_clip and config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            # logged per window for either reduction
            total += loss.item() * (len(idx) if config.loss_reduction == "mean" else 1)
            count += len(idx)
        epoch_loss = total / count
        losses.append(epoch_loss)
        log.info("epoch %d loss %.6f", epoch, epoch_loss)
        last_good = Checkpoint.from_model(model, config.to_strings(), epoch, config.seed)

    if loss_log is not None:
        write_loss_log(loss_log, losses, ablation)
    return PretrainResult(model, last_good, losses, ablation)


def write_loss_log(path: Union[str, Path], losses: list[float], ablation: Optional[Ablation] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if ablation is not None:
        lines.append(f"# {describe_ablation(ablation)}")
    lines.append("epoch,loss")
    lines += [f"{i},{v!r}" for i, v in enumerate(losses, start=1)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
