import math

import numpy as np
import pytest

from timedart.data import load_csv, make_windows, write_csv
from timedart.oracles import yule_walker_acf
from timedart.synth import SynthSpec, ar_is_stationary, generate


def test_sinusoid_noiseless_closed_form():
    spec = SynthSpec("sinusoid_mix", length=300, channels=2, frequencies=[0.05, 0.13], amplitudes=[1.0, 0.3], phases=[0.2, 1.0])
    s, labels = generate(spec)
    assert labels is None
    for c in range(2):
        for t in range(300):
            want = sum(a * math.sin(2 * math.pi * f * t + p + c * spec.channel_shift)
                       for f, a, p in zip(spec.frequencies, spec.amplitudes, spec.phases))
            assert abs(s.values[c, t] - want) <= 1e-9


def test_yule_walker_oracle_closed_form():
    rho = yule_walker_acf([0.6, 0.3], 2)
    assert abs(rho[1] - 0.6 / 0.7) < 1e-12
    assert abs(rho[2] - (0.6 * rho[1] + 0.3)) < 1e-12


def test_ar_autocorrelation_matches_yule_walker():
    s, _ = generate(SynthSpec("ar_process", length=100_000, ar_coefs=[0.6, 0.3], noise_std=0.1, seed=3))
    x = s.values[0] - s.values[0].mean()
    lag1 = np.dot(x[:-1], x[1:]) / np.dot(x, x)
    assert abs(lag1 - yule_walker_acf([0.6, 0.3], 1)[1]) <= 0.05


def test_ar_rejects_non_stationary():
    assert ar_is_stationary([0.6, 0.3]) and not ar_is_stationary([0.7, 0.4]) and not ar_is_stationary([1.0])
    with pytest.raises(ValueError):
        generate(SynthSpec("ar_process", ar_coefs=[0.7, 0.4]))


def test_class_shapes_balanced():
    s, labels = generate(SynthSpec("class_shapes", length=300, num_classes=3, window=16, noise_std=0.1))
    wins = make_windows(s, 16, 0, 16, labels=labels)
    assert len(wins) == 300
    assert np.bincount([w.label for w in wins]).tolist() == [100, 100, 100]


@pytest.mark.parametrize("kind", ["sinusoid_mix", "ar_process", "class_shapes"])
def test_generate_deterministic(kind):
    spec = SynthSpec(kind, length=50, channels=2, noise_std=0.2, seed=9)
    a, la = generate(spec)
    b, lb = generate(spec)
    assert np.array_equal(a.values, b.values)
    assert (la is None and lb is None) or np.array_equal(la, lb)
    c, _ = generate(SynthSpec(kind, length=50, channels=2, noise_std=0.2, seed=10))
    assert not np.array_equal(a.values, c.values)


def test_unknown_kind():
    with pytest.raises(ValueError):
        generate(SynthSpec("brownian"))


def test_csv_roundtrip_exact(tmp_path):
    s, _ = generate(SynthSpec("ar_process", length=500, channels=3, noise_std=1.0, seed=1))
    write_csv(s, tmp_path / "ar.csv")
    assert np.array_equal(load_csv(tmp_path / "ar.csv").values, s.values)
