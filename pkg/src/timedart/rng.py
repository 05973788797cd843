"""Named random sub-streams derived from a single integer seed."""
from __future__ import annotations

import zlib

import numpy as np
import torch


def substream_seed(seed: int, name: str, *keys: int) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()), *map(int, keys)))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def numpy_stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name, *keys))


def torch_stream(seed: int, name: str, *keys: int) -> torch.Generator:
    return torch.Generator().manual_seed(substream_seed(seed, name, *keys))
