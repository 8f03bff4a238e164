"""Sampler front end: configuration, per-chain runner, draw storage.

Chains are independent: each owns a counter-based RNG stream keyed by
(seed, chain_index), so results are bit-identical for a fixed seed
regardless of how many worker threads execute them.
"""

from __future__ import annotations

import warnings as _warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .adapt import (DualAveraging, WindowEstimator, find_initial_step_size,
                    warmup_schedule)
from .diagnostics import ess_bulk, ess_tail, split_rhat
from .nuts import Metric, nuts_transition

__all__ = ["SamplerConfig", "PosteriorDraws", "sample"]

_METRIC_KINDS = ("diag", "dense")


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_iter: int = 1000
    adapt_delta: float = 0.80
    max_treedepth: int = 10
    metric: str = "diag"
    seed: int = 0

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if self.n_warmup < 0:
            raise ValueError("n_warmup must be >= 0")
        if not 0.0 < self.adapt_delta < 1.0:
            raise ValueError("adapt_delta must be in (0, 1)")
        if self.max_treedepth < 1:
            raise ValueError("max_treedepth must be >= 1")
        if self.metric not in _METRIC_KINDS:
            raise ValueError(f"metric must be one of {_METRIC_KINDS}")

    def to_dict(self) -> dict:
        return {"n_chains": self.n_chains, "n_warmup": self.n_warmup,
                "n_iter": self.n_iter, "adapt_delta": self.adapt_delta,
                "max_treedepth": self.max_treedepth, "metric": self.metric,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        unknown = set(d) - {f.name for f in
                            cls.__dataclass_fields__.values()}
        if unknown:
            raise ValueError(f"unknown sampler options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PosteriorDraws:
    """Post-warmup draws plus per-iteration sampler statistics.

    ``draws`` has shape (n_chains, n_iter, dim) on the unconstrained
    scale; warmup iterations are never stored.
    """

    draws: np.ndarray
    param_names: tuple
    divergent: np.ndarray
    treedepth_hit: np.ndarray
    energy: np.ndarray
    accept_stat: np.ndarray
    n_leapfrog: np.ndarray
    step_size: np.ndarray
    metric_kind: str
    metric: np.ndarray
    config: SamplerConfig
    warnings: tuple = ()

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_iter(self) -> int:
        return self.draws.shape[1]

    @property
    def dim(self) -> int:
        return self.draws.shape[2]

    def flat(self) -> np.ndarray:
        """All chains pooled: (n_chains * n_iter, dim)."""
        return self.draws.reshape(-1, self.dim)

    def get(self, name: str) -> np.ndarray:
        """Draws of one named parameter, shape (n_chains, n_iter)."""
        try:
            j = self.param_names.index(name)
        except ValueError:
            raise KeyError(f"unknown parameter {name!r}") from None
        return self.draws[:, :, j]

    def n_divergent(self) -> int:
        return int(self.divergent.sum())

    def diagnostics(self) -> dict:
        """Per-parameter convergence table.

        Returns a dict of equal-length arrays keyed by ``param``,
        ``mean``, ``sd``, ``rhat``, ``ess_bulk``, ``ess_tail``.  With a
        single chain R-hat is NaN (reported absent); constant
        parameters get NaN ESS.
        """
        rows = {"param": list(self.param_names), "mean": [], "sd": [],
                "rhat": [], "ess_bulk": [], "ess_tail": []}
        for j in range(self.dim):
            x = self.draws[:, :, j]
            rows["mean"].append(float(x.mean()))
            rows["sd"].append(float(x.std(ddof=1)))
            rows["rhat"].append(split_rhat(x))
            rows["ess_bulk"].append(ess_bulk(x))
            rows["ess_tail"].append(ess_tail(x))
        return {k: (v if k == "param" else np.asarray(v))
                for k, v in rows.items()}


@dataclass
class _ChainResult:
    draws: np.ndarray
    divergent: np.ndarray
    treedepth_hit: np.ndarray
    energy: np.ndarray
    accept_stat: np.ndarray
    n_leapfrog: np.ndarray
    step_size: float
    metric: Metric


def _chain_rng(seed: int, chain: int) -> np.random.Generator:
    key = np.array([seed % (2 ** 64), chain], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _run_chain(value_and_grad, theta0, config: SamplerConfig,
               chain: int) -> _ChainResult:
    dim = theta0.shape[0]
    rng = _chain_rng(config.seed, chain)
    logp, grad = value_and_grad(theta0)
    if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
        raise ValueError(
            f"non-finite log density or gradient at the initial point of "
            f"chain {chain}: logp={logp!r}")
    theta = np.array(theta0, dtype=float, copy=True)
    metric = Metric.identity(dim, dense=(config.metric == "dense"))

    eps = find_initial_step_size(value_and_grad, theta, logp, grad,
                                 metric, rng)
    averaging = DualAveraging.from_step_size(eps, config.adapt_delta)
    schedule = warmup_schedule(config.n_warmup)
    window = WindowEstimator(dim, dense=(config.metric == "dense"))

    for it in range(config.n_warmup):
        theta, logp, grad, st = nuts_transition(
            value_and_grad, theta, logp, grad, eps, metric,
            config.max_treedepth, rng)
        eps = averaging.update(st.accept_stat)
        if schedule.init_end <= it < schedule.term_start:
            window.push(theta)
            if schedule.window_closing_at(it) is not None:
                metric = window.estimate()
                window.reset()
                averaging.restart(averaging.step_size)
                eps = averaging.step_size

    if config.n_warmup > 0:
        eps = averaging.averaged_step_size

    draws = np.empty((config.n_iter, dim))
    divergent = np.zeros(config.n_iter, dtype=bool)
    treedepth_hit = np.zeros(config.n_iter, dtype=bool)
    energy = np.empty(config.n_iter)
    accept = np.empty(config.n_iter)
    n_leapfrog = np.zeros(config.n_iter, dtype=np.int64)
    for it in range(config.n_iter):
        theta, logp, grad, st = nuts_transition(
            value_and_grad, theta, logp, grad, eps, metric,
            config.max_treedepth, rng)
        draws[it] = theta
        divergent[it] = st.divergent
        treedepth_hit[it] = st.treedepth_hit
        energy[it] = st.energy
        accept[it] = st.accept_stat
        n_leapfrog[it] = st.n_leapfrog
    return _ChainResult(draws=draws, divergent=divergent,
                        treedepth_hit=treedepth_hit, energy=energy,
                        accept_stat=accept, n_leapfrog=n_leapfrog,
                        step_size=eps, metric=metric)


def _as_value_and_grad(target):
    fn = getattr(target, "value_and_grad", None)
    if fn is None:
        if not callable(target):
            raise TypeError(
                "target must be callable or expose value_and_grad()")
        fn = target

    def wrapped(u):
        value, grad = fn(u)
        return float(value), np.asarray(grad, dtype=float)

    return wrapped


def _resolve_inits(init, n_chains: int):
    arr = np.asarray(init, dtype=float)
    if arr.ndim == 1:
        return [arr.copy() for _ in range(n_chains)]
    if arr.ndim == 2:
        if arr.shape[0] != n_chains:
            raise ValueError(
                f"got {arr.shape[0]} initial points for {n_chains} chains")
        return [arr[c].copy() for c in range(n_chains)]
    raise ValueError("init must be a vector or one vector per chain")


def sample(target, config: SamplerConfig, init, param_names=None,
           threads: int = 1) -> PosteriorDraws:
    """Run NUTS chains against a log density with gradient.

    ``target`` is either a callable ``u -> (logp, grad)`` or an object
    with a ``value_and_grad`` method.  ``init`` is one unconstrained
    vector shared by all chains, or an (n_chains, dim) array.
    """
    value_and_grad = _as_value_and_grad(target)
    inits = _resolve_inits(init, config.n_chains)
    dim = inits[0].shape[0]
    if param_names is None:
        param_names = tuple(f"theta[{j}]" for j in range(dim))
    else:
        param_names = tuple(param_names)
        if len(param_names) != dim:
            raise ValueError(
                f"{len(param_names)} names for dimension {dim}")

    chain_ids = list(range(config.n_chains))
    if threads > 1 and config.n_chains > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                lambda c: _run_chain(value_and_grad, inits[c], config, c),
                chain_ids))
    else:
        results = [_run_chain(value_and_grad, inits[c], config, c)
                   for c in chain_ids]

    dense = config.metric == "dense"
    metric_arr = np.stack([r.metric.cov if dense else r.metric.var
                           for r in results])
    out = PosteriorDraws(
        draws=np.stack([r.draws for r in results]),
        param_names=param_names,
        divergent=np.stack([r.divergent for r in results]),
        treedepth_hit=np.stack([r.treedepth_hit for r in results]),
        energy=np.stack([r.energy for r in results]),
        accept_stat=np.stack([r.accept_stat for r in results]),
        n_leapfrog=np.stack([r.n_leapfrog for r in results]),
        step_size=np.array([r.step_size for r in results]),
        metric_kind=config.metric,
        metric=metric_arr,
        config=config,
    )
    notes = []
    frac_div = out.divergent.mean()
    if frac_div > 0.5:
        msg = (f"{out.n_divergent()} of {out.divergent.size} transitions "
               f"({100 * frac_div:.0f}%) were divergent; results are "
               f"unreliable")
        notes.append(msg)
        _warnings.warn(msg, RuntimeWarning, stacklevel=2)
    if notes:
        out = replace(out, warnings=tuple(notes))
    return out
