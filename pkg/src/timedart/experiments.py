"""Desk-scale forecasting experiments: pre-training benefit and ablations on synthetic data."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import SplitSpec, make_windows, split_series, stack_windows, instance_normalize
from .finetune import FinetuneConfig, ForecastData, Forecaster, backbone_from, evaluate_forecast, finetune, predict_forecast
from .pretrain import PretrainConfig, pretrain_loop
from .synth import forecasting_corpus

log = logging.getLogger(__name__)

ABLATIONS = {
    "TimeDART": dict(no_ar=False, no_diff=False),
    "w/o AR": dict(no_ar=True, no_diff=False),
    "w/o Diff": dict(no_ar=False, no_diff=True),
    "w/o AR-Diff": dict(no_ar=True, no_diff=True),
}


@dataclass
class ForecastSetup:
    lookback: int = 64
    horizon: int = 16
    channels: int = 2
    length: int = 2109  # ~2000 windows over the three splits
    corpus_seed: int = 0
    noise_std: float = 0.1
    ar_noise_std: float = 0.3


@dataclass
class Corpus:
    pretrain_x: np.ndarray  # [M, L] normalized univariate lookbacks
    train: ForecastData
    val: ForecastData
    test: ForecastData

    @property
    def window_count(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


def build_corpus(setup: ForecastSetup) -> Corpus:
    series = forecasting_corpus(setup.length, setup.channels, setup.corpus_seed, setup.noise_std, setup.ar_noise_std)
    parts = split_series(series, SplitSpec(context=setup.lookback), min_length=setup.lookback + setup.horizon)
    data = []
    for part in parts:
        x, y, _ = stack_windows(make_windows(part, setup.lookback, setup.horizon))
        data.append(ForecastData.from_arrays(x, y))
    pre = stack_windows(make_windows(parts[0], setup.lookback, 0))[0]
    pre = instance_normalize(pre)[0].reshape(-1, setup.lookback)
    return Corpus(pre, *data)


def run_forecast_arm(
    corpus: Corpus,
    pretrain_cfg: PretrainConfig,
    ft_cfg: FinetuneConfig,
    pretrained: bool,
    setup: ForecastSetup,
) -> dict[str, float]:
    """Pre-train (optionally), fine-tune on train, report test metrics in original units."""
    ckpt = pretrain_loop(corpus.pretrain_x, pretrain_cfg).checkpoint if pretrained else None
    backbone = backbone_from(ckpt, pretrain_cfg, random_init=not pretrained, seed=pretrain_cfg.seed)
    model = Forecaster(backbone, setup.lookback, setup.horizon, ft_cfg.keep_causal_mask, seed=ft_cfg.seed)
    finetune(corpus.train, model, ft_cfg)
    return evaluate_forecast(predict_forecast(model, corpus.test), corpus.test.raw_y)


def pretraining_benefit(
    setup: ForecastSetup,
    base: PretrainConfig,
    ft: FinetuneConfig,
    seeds=range(5),
    long_random_epochs: Optional[int] = 60,
    corpus: Optional[Corpus] = None,
) -> list[dict]:
    corpus = corpus or build_corpus(setup)
    rows = []
    for seed in seeds:
        pcfg = replace(base, seed=seed)
        fcfg = replace(ft, seed=seed)
        row = {"seed": seed}
        row["pretrained"] = run_forecast_arm(corpus, pcfg, fcfg, True, setup)["MSE"]
        row["random"] = run_forecast_arm(corpus, pcfg, fcfg, False, setup)["MSE"]
        if long_random_epochs:
            row["random_long"] = run_forecast_arm(corpus, pcfg, replace(fcfg, epochs=long_random_epochs), False, setup)["MSE"]
        log.info("seed %d: %s", seed, row)
        rows.append(row)
    return rows


def ablation_study(
    setup: ForecastSetup,
    base: PretrainConfig,
    ft: FinetuneConfig,
    seeds=range(5),
    corpus: Optional[Corpus] = None,
) -> dict[str, list[float]]:
    corpus = corpus or build_corpus(setup)
    out = {}
    for name, flags in ABLATIONS.items():
        out[name] = []
        for seed in seeds:
            pcfg = replace(base, seed=seed, **flags)
            out[name].append(run_forecast_arm(corpus, pcfg, replace(ft, seed=seed), True, setup)["MSE"])
        log.info("%s: mean test MSE %.5f", name, float(np.mean(out[name])))
    return out


def overfit_corpus(windows: int = 32, lookback: int = 64, seed: int = 0) -> np.ndarray:
    """``windows`` non-overlapping normalized lookbacks from a noiseless single-channel sinusoid mix."""
    from .synth import SynthSpec, generate

    series, _ = generate(SynthSpec("sinusoid_mix", length=windows * lookback, seed=seed))
    x = stack_windows(make_windows(series, lookback, 0, stride=lookback))[0]
    return instance_normalize(x)[0].reshape(-1, lookback)


SMOKE_CONFIG = PretrainConfig(patch_len=4, model_dim=16, heads=2, epochs=50, batch_size=4, learning_rate=1e-3)

# settings shared by the pre-training benefit and ablation experiments
BENEFIT_PRETRAIN = PretrainConfig(patch_len=4, model_dim=16, heads=2, epochs=50, batch_size=64, learning_rate=1e-3)
BENEFIT_FINETUNE = FinetuneConfig(epochs=10, learning_rate=1e-4, batch_size=64)
