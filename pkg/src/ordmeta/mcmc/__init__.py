"""No-U-turn sampler with windowed adaptation and convergence
diagnostics."""

from .adapt import (DualAveraging, WarmupSchedule, WindowEstimator,
                    find_initial_step_size, warmup_schedule)
from .diagnostics import ess_bulk, ess_mean, ess_tail, split_rhat
from .engine import PosteriorDraws, SamplerConfig, sample
from .io import read_draws, write_csv, write_draws
from .nuts import DIVERGENCE_ENERGY, Metric, leapfrog, nuts_transition

__all__ = [
    "SamplerConfig", "PosteriorDraws", "sample",
    "split_rhat", "ess_bulk", "ess_tail", "ess_mean",
    "Metric", "leapfrog", "nuts_transition", "DIVERGENCE_ENERGY",
    "DualAveraging", "WarmupSchedule", "WindowEstimator",
    "warmup_schedule", "find_initial_step_size",
    "read_draws", "write_csv", "write_draws",
]
