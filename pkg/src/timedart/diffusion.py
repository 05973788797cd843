"""Noise schedules and the closed-form forward corruption of patches."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

SCHEDULE_KINDS = ("cosine", "linear")
STEP_MODES = ("independent", "same")


@dataclass(frozen=True)
class NoiseSchedule:
    """``alpha[s-1]`` is alpha(s) for s = 1..T; ``gamma[s]`` is the running product, ``gamma[0] = 1``."""

    kind: str
    total_steps: int
    alpha: np.ndarray
    gamma: np.ndarray

    def gamma_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(np.array(self.gamma), dtype=dtype)


def build_schedule(kind: str = "cosine", T: int = 1000) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"total steps must be >= 1, got {T}")
    s = np.arange(T + 1, dtype=np.float64)
    if kind == "cosine":
        # improved-DDPM squared-cosine cumulative curve, offset 0.008
        f = np.cos(((s / T + 0.008) / 1.008) * math.pi / 2) ** 2
        g = f / f[0]
        alpha = np.clip(g[1:] / g[:-1], 0.001, 0.9999)
    elif kind == "linear":
        beta = np.linspace(1e-4, 0.02, T, dtype=np.float64)
        alpha = 1.0 - beta
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    gamma = np.concatenate([[1.0], np.cumprod(alpha)])
    alpha.setflags(write=False)
    gamma.setflags(write=False)
    return NoiseSchedule(kind, T, alpha, gamma)


@dataclass
class StepAssignment:
    steps: np.ndarray
    mode: str


def sample_steps(
    N: int,
    mode: str,
    T: int,
    rng: Union[int, np.random.Generator, None] = None,
    step: Optional[int] = None,
) -> StepAssignment:
    """Draw one diffusion step per patch, uniform over ``{1..T}``.

    In ``same`` mode every patch shares one step (``step`` if given, else drawn).
    """
    if N < 1:
        raise ValueError(f"need at least one patch, got {N}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if mode == "independent":
        steps = rng.integers(1, T + 1, size=N)
    elif mode == "same":
        s = step if step is not None else int(rng.integers(1, T + 1))
        steps = np.full(N, s, dtype=np.int64)
    else:
        raise ValueError(f"unknown step mode {mode!r}")
    return StepAssignment(steps.astype(np.int64), mode)


def draw_steps(shape: tuple, mode: str, T: int, generator: torch.Generator) -> torch.Tensor:
    """Batched torch variant used in training; ``shape`` is ``[..., N]``."""
    if mode == "independent":
        return torch.randint(1, T + 1, shape, generator=generator)
    if mode == "same":
        s = torch.randint(1, T + 1, shape[:-1] + (1,), generator=generator)
        return s.expand(shape).clone()
    raise ValueError(f"unknown step mode {mode!r}")


def add_noise(x0, s, schedule: NoiseSchedule, epsilon):
    """``sqrt(gamma[s]) * x0 + sqrt(1 - gamma[s]) * epsilon``.

    ``s`` is an int or an integer array broadcastable against ``x0[..., 0]``
    (one step per patch, patch elements on the last axis).
    """
    steps = np.asarray(s.cpu() if isinstance(s, torch.Tensor) else s)
    if steps.size and (steps.min() < 0 or steps.max() > schedule.total_steps):
        raise ValueError(f"diffusion step out of range [0, {schedule.total_steps}]")
    if isinstance(x0, torch.Tensor):
        g = schedule.gamma_tensor(torch.float64)[torch.as_tensor(steps, dtype=torch.long)].to(x0.dtype)
        if g.ndim:
            g = g.unsqueeze(-1)
        return torch.sqrt(g) * x0 + torch.sqrt(1.0 - g) * epsilon
    g = schedule.gamma[steps]
    if np.ndim(g):
        g = g[..., None]
    return np.sqrt(g) * np.asarray(x0) + np.sqrt(1.0 - g) * np.asarray(epsilon)
