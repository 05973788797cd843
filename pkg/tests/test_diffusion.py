import math

import numpy as np
import pytest
import torch
from scipy import stats as sps

from timedart.diffusion import add_noise, build_schedule, draw_steps, sample_steps
from timedart.oracles import monte_carlo_noise_stats


@pytest.mark.parametrize("kind", ["cosine", "linear"])
@pytest.mark.parametrize("T", [1, 10, 750, 1000, 1250])
def test_schedule_invariants(kind, T):
    s = build_schedule(kind, T)
    assert s.gamma[0] == 1.0
    assert len(s.alpha) == T and len(s.gamma) == T + 1
    assert np.all((s.alpha > 0) & (s.alpha < 1))
    assert np.all(np.diff(s.gamma) < 0)
    g = [1.0]
    for a in s.alpha:
        g.append(g[-1] * a)
    assert np.max(np.abs(np.array(g) - s.gamma)) <= 1e-12


def test_cosine_is_noisy_at_the_end():
    s = build_schedule("cosine", 1000)
    assert s.gamma[1000] < 1e-3
    # closed-form cumulative curve before clamping bites
    f = lambda t: math.cos(((t / 1000 + 0.008) / 1.008) * math.pi / 2) ** 2
    assert abs(s.gamma[500] - f(500) / f(0)) < 1e-3


def test_linear_matches_scalar_product():
    s = build_schedule("linear", 1000)
    prod = 1.0
    for i in range(1000):
        beta = 1e-4 + (0.02 - 1e-4) * i / 999
        prod *= 1 - beta
    assert abs(s.gamma[1000] - prod) / prod <= 1e-9


def test_schedule_errors():
    with pytest.raises(ValueError):
        build_schedule("cosine", 0)
    with pytest.raises(ValueError):
        build_schedule("sigmoid", 10)


def test_sample_steps_basic():
    assert np.all(sample_steps(20, "independent", 1, rng=0).steps == 1)
    assert sample_steps(8, "same", 1000, step=500).steps.tolist() == [500] * 8
    a = sample_steps(50, "independent", 1000, rng=7).steps
    b = sample_steps(50, "independent", 1000, rng=7).steps
    assert np.array_equal(a, b)
    same = sample_steps(10, "same", 1000, rng=3).steps
    assert len(set(same.tolist())) == 1


def test_step_uniformity_deciles():
    steps = sample_steps(100_000, "independent", 1000, rng=11).steps
    assert steps.min() >= 1 and steps.max() <= 1000
    counts = np.bincount((steps - 1) // 100, minlength=10)
    sigma = math.sqrt(100_000 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 10_000) <= 3 * sigma)
    assert sps.chisquare(counts).pvalue > 1e-3


def test_draw_steps_modes():
    g = torch.Generator().manual_seed(0)
    s = draw_steps((4, 6), "same", 100, g)
    assert torch.all(s == s[:, :1])
    s = draw_steps((4, 6), "independent", 100, g)
    assert s.min() >= 1 and s.max() <= 100


def test_add_noise_branches(rng):
    sched = build_schedule("cosine", 1000)
    x0 = rng.normal(size=8)
    eps = rng.normal(size=8)
    assert np.array_equal(add_noise(x0, 0, sched, eps), x0)
    for s in (1, 10, 999):
        np.testing.assert_allclose(add_noise(x0, s, sched, np.zeros(8)), math.sqrt(sched.gamma[s]) * x0)
        want = math.sqrt(sched.gamma[s]) * x0 + math.sqrt(1 - sched.gamma[s]) * eps
        np.testing.assert_allclose(add_noise(x0, s, sched, eps), want, atol=1e-12)
    with pytest.raises(ValueError):
        add_noise(x0, 1001, sched, eps)
    with pytest.raises(ValueError):
        add_noise(x0, -1, sched, eps)


def test_add_noise_linear_in_inputs(rng):
    sched = build_schedule("linear", 100)
    x0, eps = rng.normal(size=(2, 5, 4))
    steps = rng.integers(0, 101, size=5)
    for a in (-2.0, 0.5, 3.0):
        np.testing.assert_allclose(add_noise(a * x0, steps, sched, a * eps), a * add_noise(x0, steps, sched, eps), atol=1e-12)


def test_add_noise_torch_per_patch_steps():
    sched = build_schedule("cosine", 50)
    x0 = torch.randn(2, 3, 4, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, dtype=torch.float64)
    steps = torch.tensor([[1, 25, 50], [0, 3, 7]])
    out = add_noise(x0, steps, sched, eps)
    for b in range(2):
        for j in range(3):
            g = sched.gamma[steps[b, j]]
            assert torch.allclose(out[b, j], math.sqrt(g) * x0[b, j] + math.sqrt(1 - g) * eps[b, j])


def normalized_window(rng, L=336):
    x = np.cumsum(rng.normal(size=L)) + np.sin(np.arange(L) / 5)
    return (x - x.mean()) / x.std()


@pytest.mark.parametrize("step", [1, 500, 1000])
def test_same_step_noising_keeps_moments(rng, step):
    sched = build_schedule("cosine", 1000)
    st_ = monte_carlo_noise_stats(normalized_window(rng), sched.gamma, patch_len=8, trials=10_000, step=step, seed=step)
    assert abs(st_["mean"]) <= 0.02
    assert abs(st_["variance"] - 1) <= 0.05


def test_independent_steps_break_unit_variance():
    sched = build_schedule("cosine", 1000)
    P, N = 8, 42
    # half the patches carry +-sqrt(2), the other half zeros: mean 0, variance 1
    x = np.zeros(N * P)
    loud = np.arange(N) % 2 == 0
    for j in np.where(loud)[0]:
        x[j * P:(j + 1) * P] = math.sqrt(2) * np.where(np.arange(P) % 2 == 0, 1, -1)
    assert abs(x.mean()) < 1e-12 and abs(x.var() - 1) < 1e-12
    steps = np.where(loud, 1, 1000)
    st_ = monte_carlo_noise_stats(x, sched.gamma, P, trials=10_000, steps=steps)
    assert not 0.95 <= st_["variance"] <= 1.05


def test_mc_stats_errors_and_clean_step(rng):
    x = normalized_window(rng, 64)
    sched = build_schedule("cosine", 100)
    with pytest.raises(ValueError):
        monte_carlo_noise_stats(x, sched.gamma, 8, trials=0)
    st_ = monte_carlo_noise_stats(x, sched.gamma, 8, trials=100, step=0)
    assert abs(st_["variance"] - x.var()) < 1e-12
