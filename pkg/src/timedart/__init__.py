"""Patch-level autoregressive diffusion pre-training for time series."""

from .data import (
    MultivariateSeries,
    NormStats,
    SplitSpec,
    Window,
    channelize,
    dechannelize,
    denormalize,
    instance_normalize,
    load_csv,
    make_windows,
    split_series,
)
from .diffusion import NoiseSchedule, add_noise, build_schedule, sample_steps
from .model import MaskSpec, ModelConfig, TimeDART, build_mask, gradient
from .patching import patchify, positional_table, sos_shift, unpatchify
from .pretrain import (
    Checkpoint,
    PretrainConfig,
    apply_ablation,
    load_checkpoint,
    pretrain_loop,
    pretrain_step,
    save_checkpoint,
)

__version__ = "0.1.0"
