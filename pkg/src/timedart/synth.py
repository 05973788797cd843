"""Controllable synthetic corpora for desk-scale experiments."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import MultivariateSeries
from .rng import numpy_stream

SYNTH_KINDS = ("sinusoid_mix", "ar_process", "class_shapes")


@dataclass
class SynthSpec:
    kind: str = "sinusoid_mix"
    length: int = 1000
    channels: int = 1
    noise_std: float = 0.0
    seed: int = 0
    # sinusoid_mix: value[c, t] = sum_i amp_i * sin(2 pi f_i t + phase_i + c * channel_shift)
    frequencies: list[float] = field(default_factory=lambda: [1 / 24, 1 / 7])
    amplitudes: list[float] = field(default_factory=lambda: [1.0, 0.5])
    phases: list[float] = field(default_factory=lambda: [0.0, 0.0])
    channel_shift: float = 0.7
    # ar_process
    ar_coefs: list[float] = field(default_factory=lambda: [0.6, 0.3])
    burn_in: int = 500
    # class_shapes: `length` is the number of windows, each `window` steps long
    num_classes: int = 3
    window: int = 64


def ar_is_stationary(coefs) -> bool:
    """True when all roots of ``1 - a1 z - ... - ap z^p`` lie strictly outside the unit circle."""
    if len(coefs) == 0:
        return True
    poly = np.concatenate([-np.asarray(coefs, dtype=np.float64)[::-1], [1.0]])
    return bool(np.all(np.abs(np.roots(poly)) > 1.0))


def sinusoid_values(spec: SynthSpec) -> np.ndarray:
    t = np.arange(spec.length, dtype=np.float64)
    out = np.zeros((spec.channels, spec.length))
    for c in range(spec.channels):
        for f, a, p in zip(spec.frequencies, spec.amplitudes, spec.phases):
            out[c] += a * np.sin(2 * math.pi * f * t + p + c * spec.channel_shift)
    return out


def _class_template(k: int, t: np.ndarray, period: float) -> np.ndarray:
    phase = (t / period) % 1.0
    shape = k % 3
    if shape == 0:
        base = np.sin(2 * math.pi * phase)
    elif shape == 1:
        base = np.where(phase < 0.5, 1.0, -1.0)
    else:
        base = 2.0 * phase - 1.0
    return base


def generate(spec: SynthSpec) -> tuple[MultivariateSeries, Optional[np.ndarray]]:
    """Series ``[C, T]`` and, for ``class_shapes``, per-step labels.

    ``class_shapes`` concatenates ``spec.length`` windows of ``spec.window``
    steps; labels are balanced (equal counts when divisible) and shuffled.
    """
    rng = numpy_stream(spec.seed, f"synth-{spec.kind}")
    if spec.kind == "sinusoid_mix":
        values = sinusoid_values(spec)
        if spec.noise_std:
            values = values + spec.noise_std * rng.standard_normal(values.shape)
        return MultivariateSeries(values), None

    if spec.kind == "ar_process":
        if not ar_is_stationary(spec.ar_coefs):
            raise ValueError(f"AR coefficients {spec.ar_coefs} are not stationary")
        p = len(spec.ar_coefs)
        a = np.asarray(spec.ar_coefs, dtype=np.float64)
        total = spec.length + spec.burn_in
        e = spec.noise_std * rng.standard_normal((spec.channels, total))
        x = np.zeros((spec.channels, total))
        for t in range(total):
            past = x[:, max(0, t - p):t][:, ::-1]
            x[:, t] = past @ a[: past.shape[1]] + e[:, t]
        return MultivariateSeries(x[:, spec.burn_in:]), None

    if spec.kind == "class_shapes":
        K = spec.num_classes
        if K < 2:
            raise ValueError("class_shapes needs at least two classes")
        labels = rng.permutation(np.arange(spec.length) % K)
        t = np.arange(spec.window, dtype=np.float64)
        values = np.empty((spec.channels, spec.length * spec.window))
        for w, k in enumerate(labels):
            period = spec.window / (1 + k // 3 + 1)
            for c in range(spec.channels):
                amp = rng.uniform(0.5, 1.5)
                shift = rng.uniform(0, period)
                seg = amp * _class_template(int(k), t + shift, period)
                values[c, w * spec.window:(w + 1) * spec.window] = seg + spec.noise_std * rng.standard_normal(spec.window)
        return MultivariateSeries(values), np.repeat(labels, spec.window)

    raise ValueError(f"unknown synthetic kind {spec.kind!r}; expected one of {SYNTH_KINDS}")


def forecasting_corpus(
    length: int,
    channels: int = 1,
    seed: int = 0,
    noise_std: float = 0.1,
    ar_noise_std: float = 0.3,
) -> MultivariateSeries:
    """Sum of a noisy sinusoid mix and a stationary AR(2) process."""
    sin, _ = generate(SynthSpec("sinusoid_mix", length=length, channels=channels, noise_std=noise_std, seed=seed))
    ar, _ = generate(SynthSpec("ar_process", length=length, channels=channels, noise_std=ar_noise_std, seed=seed))
    return MultivariateSeries(sin.values + ar.values)
