"""Non-overlapping patching, sinusoidal positions and the SOS right-shift."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


class PatchError(ValueError):
    pass


@dataclass
class PatchTensor:
    patches: object  # np.ndarray or torch.Tensor, [..., N, P]
    patch_len: int
    num_patches: int


def patchify(window, P: int) -> PatchTensor:
    """Split the last axis (length L) into ``N = L / P`` contiguous patches of length P."""
    if P < 1:
        raise PatchError(f"patch length must be >= 1, got {P}")
    L = window.shape[-1]
    if L % P:
        raise PatchError(f"window length {L} is not divisible by patch length {P}")
    N = L // P
    return PatchTensor(window.reshape(*window.shape[:-1], N, P), P, N)


def unpatchify(pt) -> object:
    patches = pt.patches if isinstance(pt, PatchTensor) else pt
    return patches.reshape(*patches.shape[:-2], patches.shape[-2] * patches.shape[-1])


def embed_patches(patches: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Affine map ``patch @ W + b`` with ``W`` of shape ``[P, D]``."""
    if patches.shape[-1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise PatchError(f"shape mismatch: patches {tuple(patches.shape)}, W {tuple(weight.shape)}, b {tuple(bias.shape)}")
    return patches @ weight + bias


def positional_table(N: int, D: int) -> np.ndarray:
    """Sinusoidal table ``[N, D]``: even dims sin(pos / 10000^(2i/D)), odd dims cos."""
    if D % 2:
        raise PatchError(f"model dimension must be even for sinusoidal positions, got {D}")
    pos = np.arange(N, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, D, 2, dtype=np.float64) / D)
    table = np.zeros((N, D), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


def sos_shift(embeddings: torch.Tensor, sos: torch.Tensor, pe: torch.Tensor) -> torch.Tensor:
    """Prepend ``sos``, drop the last embedding, add positions.

    ``embeddings`` is ``[..., N, D]``; output position 0 is ``sos + pe[0]`` and
    position j is ``embeddings[..., j - 1, :] + pe[j]``.
    """
    N, D = embeddings.shape[-2:]
    if pe.shape[0] < N or pe.shape[-1] != D or sos.shape[-1] != D:
        raise PatchError(f"shape mismatch: embeddings {tuple(embeddings.shape)}, pe {tuple(pe.shape)}, sos {tuple(sos.shape)}")
    head = sos.expand(*embeddings.shape[:-2], 1, D)
    shifted = torch.cat([head, embeddings[..., : N - 1, :]], dim=-2)
    return shifted + pe[:N]
