"""Attention encoder, denoising decoder and projector with explicit visibility masks."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from functools import lru_cache
from typing import Callable, Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .patching import embed_patches, positional_table, sos_shift

MASK_FILL = -1e9
MASK_KINDS = ("causal", "self_only", "partial_causal", "none")


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    kind: str = "causal"
    ratio: float = 0.0

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1], got {self.ratio}")

    @classmethod
    def from_ratio(cls, ratio: float) -> "MaskSpec":
        """Decoder mask from a mask ratio: 1.0 is self-only, 0.0 causal, anything between partial."""
        if ratio == 1.0:
            return cls("self_only")
        if ratio == 0.0:
            return cls("causal")
        return cls("partial_causal", ratio)


def build_mask(spec: MaskSpec, N: int, generator: Union[torch.Generator, int, None] = None) -> Optional[torch.Tensor]:
    """Boolean ``[N, N]`` visibility, ``mask[q, k]`` true iff query q may attend key k.

    Returns ``None`` for the ``none`` kind (full visibility).
    """
    if N < 1:
        raise ValueError(f"mask size must be >= 1, got {N}")
    if spec.kind == "none":
        return None
    if spec.kind == "causal":
        return torch.ones(N, N, dtype=torch.bool).tril()
    if spec.kind == "self_only":
        return torch.eye(N, dtype=torch.bool)
    if isinstance(generator, int) or generator is None:
        generator = torch.Generator().manual_seed(0 if generator is None else generator)
    mask = torch.eye(N, dtype=torch.bool)
    for q in range(1, N):
        # round half up so that e.g. 0.5 * 4 -> 2 and 0.5 * 3 -> 2
        keep = int(math.floor((1.0 - spec.ratio) * q + 0.5))
        if keep:
            mask[q, torch.randperm(q, generator=generator)[:keep]] = True
    return mask


def _init_affine(layer: nn.Linear) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    nn.init.uniform_(layer.weight, -bound, bound)
    nn.init.uniform_(layer.bias, -bound, bound)


def _linear(d_in: int, d_out: int) -> nn.Linear:
    layer = nn.Linear(d_in, d_out)
    _init_affine(layer)
    return layer


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"model dim {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d_model // heads
        self.q = _linear(d_model, d_model)
        self.k = _linear(d_model, d_model)
        self.v = _linear(d_model, d_model)
        self.o = _linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key_value, mask: Optional[torch.Tensor] = None, return_weights: bool = False):
        B, Nq, D = query.shape
        Nk = key_value.shape[1]
        q = self.q(query).view(B, Nq, self.heads, self.d_head).transpose(1, 2)
        k = self.k(key_value).view(B, Nk, self.heads, self.d_head).transpose(1, 2)
        v = self.v(key_value).view(B, Nk, self.heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores.masked_fill(~mask, MASK_FILL)
        weights = torch.softmax(scores, dim=-1)
        out = (self.dropout(weights) @ v).transpose(1, 2).reshape(B, Nq, D)
        out = self.o(out)
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = _linear(d_model, d_ff)
        self.fc2 = _linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, d_model, heads, d_ff, dropout=0.0, norm_first=False):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads, dropout)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)
        self.norm_first = norm_first

    def forward(self, x, mask=None):
        if self.norm_first:
            h = self.norm1(x)
            x = x + self.drop(self.attn(h, h, mask))
            return x + self.drop(self.ff(self.norm2(x)))
        x = self.norm1(x + self.drop(self.attn(x, x, mask)))
        return self.norm2(x + self.drop(self.ff(x)))


class DecoderLayer(nn.Module):
    """Masked self-attention over noisy queries, then cross-attention into the encoder output."""

    def __init__(self, d_model, heads, d_ff, dropout=0.0, norm_first=False):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, heads, dropout)
        self.cross_attn = MultiHeadAttention(d_model, heads, dropout)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)
        self.norm_first = norm_first

    def forward(self, x, memory, mask=None):
        if self.norm_first:
            h = self.norm1(x)
            x = x + self.drop(self.self_attn(h, h, mask))
            x = x + self.drop(self.cross_attn(self.norm2(x), memory, mask))
            return x + self.drop(self.ff(self.norm3(x)))
        x = self.norm1(x + self.drop(self.self_attn(x, x, mask)))
        x = self.norm2(x + self.drop(self.cross_attn(x, memory, mask)))
        return self.norm3(x + self.drop(self.ff(x)))


@dataclass
class ModelConfig:
    patch_len: int = 8
    model_dim: int = 32
    encoder_layers: int = 2
    decoder_layers: int = 1
    heads: int = 8
    ff_dim: Optional[int] = None
    dropout: float = 0.0
    norm_first: bool = False

    def __post_init__(self):
        if self.model_dim % 2:
            raise ValueError(f"model_dim must be even, got {self.model_dim}")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.ff_dim is None:
            self.ff_dim = 4 * self.model_dim

    def to_dict(self) -> dict:
        return asdict(self)


@lru_cache(maxsize=64)
def _pe(N: int, D: int) -> np.ndarray:
    return positional_table(N, D)


def _check_finite(x: torch.Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite activation in {where}")


class TimeDART(nn.Module):
    """Shared patch embedding, SOS token, causal encoder, denoising decoder and projector.

    All inputs are channel-independent patch batches ``[B, N, P]``.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config
        self.config = c
        self.embedding = _linear(c.patch_len, c.model_dim)
        self.sos = nn.Parameter(torch.zeros(c.model_dim))
        self.encoder = nn.ModuleList(
            EncoderLayer(c.model_dim, c.heads, c.ff_dim, c.dropout, c.norm_first) for _ in range(c.encoder_layers)
        )
        self.decoder = nn.ModuleList(
            DecoderLayer(c.model_dim, c.heads, c.ff_dim, c.dropout, c.norm_first) for _ in range(c.decoder_layers)
        )
        self.projector = _linear(c.model_dim, c.patch_len)

    def positions(self, N: int) -> torch.Tensor:
        return torch.as_tensor(_pe(N, self.config.model_dim), dtype=self.sos.dtype)

    def embed(self, patches: torch.Tensor) -> torch.Tensor:
        return embed_patches(patches, self.embedding.weight.T, self.embedding.bias)

    def encoder_input(self, patches: torch.Tensor, shift: bool = True) -> torch.Tensor:
        z = self.embed(patches)
        pe = self.positions(z.shape[-2])
        return sos_shift(z, self.sos, pe) if shift else z + pe

    def run_encoder(self, z_in: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
        h = z_in
        for i, layer in enumerate(self.encoder):
            h = layer(h, mask)
            _check_finite(h, f"encoder layer {i}")
        return h

    def encode(self, patches: torch.Tensor, mask: Optional[torch.Tensor], shift: bool = True) -> torch.Tensor:
        return self.run_encoder(self.encoder_input(patches, shift), mask)

    def noisy_input(self, noisy_patches: torch.Tensor) -> torch.Tensor:
        # same embedding weights as the clean path; positions not shifted
        return self.embed(noisy_patches) + self.positions(noisy_patches.shape[-2])

    def run_decoder(self, z_noisy: torch.Tensor, memory: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
        h = z_noisy
        for i, layer in enumerate(self.decoder):
            h = layer(h, memory, mask)
            _check_finite(h, f"decoder layer {i}")
        return h

    def project(self, z: torch.Tensor) -> torch.Tensor:
        return self.projector(z)


def gradient(model: nn.Module, loss_fn: Callable[[], torch.Tensor]) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss_fn()`` for every registered parameter.

    Parameters the loss does not touch get an all-zero gradient.
    """
    params = dict(model.named_parameters())
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteError(f"loss is not finite: {loss.item()}")
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    else:
        grads = [None] * len(params)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        out[name] = g
    return out
