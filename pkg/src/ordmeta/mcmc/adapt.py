"""Warmup adaptation: dual-averaging step size and windowed metric.

The warmup schedule has three phases: an initial buffer (15% of warmup)
that adapts only the step size against an identity metric, a middle
phase of expanding windows (base size 25, doubling, last window absorbs
the remainder) that re-estimates the metric at each window end, and a
terminal buffer (10%) that re-tunes the step size against the final
metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nuts import Metric, leapfrog

__all__ = ["DualAveraging", "WarmupSchedule", "WindowEstimator",
           "find_initial_step_size", "warmup_schedule"]


@dataclass
class DualAveraging:
    """Nesterov dual averaging of log step size toward a target
    acceptance statistic."""

    target: float
    mu: float
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    _count: int = field(default=0, init=False)
    _h_bar: float = field(default=0.0, init=False)
    _log_eps: float = field(default=0.0, init=False)
    _log_eps_bar: float = field(default=0.0, init=False)

    @classmethod
    def from_step_size(cls, eps: float, target: float) -> "DualAveraging":
        da = cls(target=target, mu=math.log(10.0 * eps))
        da._log_eps = math.log(eps)
        da._log_eps_bar = math.log(eps)
        return da

    def update(self, accept_stat: float) -> float:
        """Feed one acceptance statistic; returns the step size for the
        next iteration."""
        self._count += 1
        m = self._count
        eta = 1.0 / (m + self.t0)
        self._h_bar = ((1.0 - eta) * self._h_bar
                       + eta * (self.target - accept_stat))
        self._log_eps = self.mu - math.sqrt(m) / self.gamma * self._h_bar
        w = m ** (-self.kappa)
        self._log_eps_bar = (w * self._log_eps
                             + (1.0 - w) * self._log_eps_bar)
        return math.exp(self._log_eps)

    @property
    def step_size(self) -> float:
        return math.exp(self._log_eps)

    @property
    def averaged_step_size(self) -> float:
        return math.exp(self._log_eps_bar)

    def restart(self, eps: float) -> None:
        """Reset the averaging around a new reference step size (used at
        metric-window boundaries)."""
        self.mu = math.log(10.0 * eps)
        self._count = 0
        self._h_bar = 0.0
        self._log_eps = math.log(eps)
        self._log_eps_bar = math.log(eps)


@dataclass(frozen=True)
class WarmupSchedule:
    """Iteration spans of the three warmup phases.

    ``windows`` holds (start, end) pairs of the metric-estimation
    windows; the metric is refreshed after the last iteration of each
    window.  Empty when warmup is too short for a middle phase.
    """

    n_warmup: int
    init_end: int
    term_start: int
    windows: tuple

    def window_closing_at(self, iteration: int):
        for start, end in self.windows:
            if iteration == end - 1:
                return (start, end)
        return None


def warmup_schedule(n_warmup: int, init_frac: float = 0.15,
                    term_frac: float = 0.10, base_window: int = 25,
                    ) -> WarmupSchedule:
    init_end = int(round(init_frac * n_warmup))
    term_start = n_warmup - int(round(term_frac * n_warmup))
    if term_start - init_end < base_window:
        # too short for metric estimation: step size only
        return WarmupSchedule(n_warmup=n_warmup, init_end=n_warmup,
                              term_start=n_warmup, windows=())
    windows = []
    start = init_end
    width = base_window
    while start < term_start:
        remaining = term_start - start
        if width * 2 >= remaining:
            width = remaining
        windows.append((start, start + width))
        start += width
        width *= 2
    return WarmupSchedule(n_warmup=n_warmup, init_end=init_end,
                          term_start=term_start, windows=tuple(windows))


class WindowEstimator:
    """Accumulates draws inside one metric window and produces the
    regularized variance (diagonal) or covariance (dense) estimate."""

    def __init__(self, dim: int, dense: bool):
        self.dim = dim
        self.dense = dense
        self._draws = []

    def push(self, theta) -> None:
        self._draws.append(np.array(theta, dtype=float, copy=True))

    def __len__(self) -> int:
        return len(self._draws)

    def reset(self) -> None:
        self._draws = []

    def estimate(self) -> Metric:
        n = len(self._draws)
        if n < 2:
            return Metric.identity(self.dim, self.dense)
        x = np.asarray(self._draws)
        shrink = n / (n + 5.0)
        floor = 1e-3 * (5.0 / (n + 5.0))
        if self.dense:
            cov = np.cov(x, rowvar=False, ddof=1)
            cov = shrink * cov + floor * np.eye(self.dim)
            return Metric(cov, dense=True)
        var = np.var(x, axis=0, ddof=1)
        var = shrink * var + floor
        return Metric(np.maximum(var, 1e-10), dense=False)


def find_initial_step_size(value_and_grad, theta, logp, grad, metric,
                           rng, eps: float = 1.0) -> float:
    """Bracket a step size whose one-step acceptance crosses 1/2 by
    doubling or halving."""
    r = metric.sample_momentum(rng)
    h0 = -logp + metric.kinetic(r)

    def energy_drop(eps_try: float) -> float:
        _, r_new, _, logp_new = leapfrog(value_and_grad, theta, r, grad,
                                         eps_try, metric)
        if not np.isfinite(logp_new):
            return -math.inf
        return h0 - (-logp_new + metric.kinetic(r_new))

    drop = energy_drop(eps)
    direction = 1 if drop > math.log(0.5) else -1
    for _ in range(100):
        eps_next = eps * (2.0 ** direction)
        drop = energy_drop(eps_next)
        if direction == 1 and not (drop > math.log(0.5)):
            return eps
        if direction == -1 and not (drop < math.log(0.5)):
            return eps_next
        eps = eps_next
        if eps > 1e7 or eps < 1e-10:
            break
    return eps
