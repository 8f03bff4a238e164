"""Model bank: six families assembled as flat-vector log-posteriors.

Two parallel routes exist by design.  ``log_posterior`` (and the family
variants) evaluate the readable numpy reference; ``build_model`` compiles
the vectorized autodiff twin for sampling.  Tests pin the two routes
together and check the gradient against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import jax
import numpy as np

from . import _jaxcore
from .common import (BOXCOX_GRID, FAMILIES, ModelSpec, build_obs_table,
                     constrain, initialize, jones_thresholds, layout_for,
                     scale_link_fn, stratum_indices)
from .layout import ParamLayout
from .priors import DEFAULT_PRIORS, PriorSet
from .reference import (jones_log_posterior as _jones_reference,
                        reference_log_likelihood, reference_log_posterior,
                        stratbiv_log_posterior as _stratbiv_reference)

__all__ = [
    "FAMILIES", "BOXCOX_GRID", "ModelSpec", "PriorSet", "DEFAULT_PRIORS",
    "ParamLayout", "layout_for", "jones_thresholds", "scale_link_fn",
    "stratum_indices",
    "log_posterior", "jones_log_posterior", "stratbiv_log_posterior",
    "reference_log_posterior", "reference_log_likelihood",
    "constrain", "initialize", "CompiledModel", "build_model",
]


def log_posterior(spec: ModelSpec, data, u) -> float:
    """Log-posterior of any family at an unconstrained vector (reference
    route; use :func:`build_model` for the compiled gradient route)."""
    return reference_log_posterior(spec, data, np.asarray(u, dtype=float))


def jones_log_posterior(data, spec: ModelSpec, u) -> float:
    """Transformed-threshold family log-posterior (reference route)."""
    if spec.family != "JonesFC":
        raise ValueError("spec.family must be JonesFC")
    return _jones_reference(spec, data, np.asarray(u, dtype=float))


def stratbiv_log_posterior(data, threshold_k: int, u, priors=None) -> float:
    """Dichotomized bivariate log-posterior at one threshold (reference)."""
    return _stratbiv_reference(data, threshold_k, np.asarray(u, dtype=float),
                               priors=priors)


@dataclass
class CompiledModel:
    """A model bound to its dataset with compiled densities.

    ``data`` is the dataset the likelihood actually sees (for StratBiv,
    the stratum subset; ``stratum`` maps its rows to the original study
    indices).
    """

    spec: ModelSpec
    data: object
    layout: ParamLayout
    stratum: Optional[np.ndarray]
    _logpost: Callable
    _value_and_grad: Callable
    _loglik: Callable

    def log_posterior(self, u) -> float:
        return float(self._logpost(np.asarray(u, dtype=float)))

    def value_and_grad(self, u):
        v, g = self._value_and_grad(np.asarray(u, dtype=float))
        return float(v), np.asarray(g)

    def log_likelihood(self, u) -> np.ndarray:
        """Per-study log-likelihood vector (priors excluded)."""
        return np.asarray(self._loglik(np.asarray(u, dtype=float)))

    def reference_log_posterior(self, u) -> float:
        return reference_log_posterior(self.spec, self.data,
                                       np.asarray(u, dtype=float))

    def constrain(self, u) -> dict:
        return constrain(self.spec, u)

    def constrain_draws(self, draws: np.ndarray) -> dict:
        """Stack :meth:`constrain` over rows of a (n, dim) draw matrix."""
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        per = [self.constrain(row) for row in draws]
        return {key: np.stack([p[key] for p in per]) for key in per[0]}

    def initialize(self, seed: int, jitter: float = 0.1) -> np.ndarray:
        return initialize(self.spec, self.data, seed, jitter=jitter)


def build_model(spec: ModelSpec, data) -> CompiledModel:
    """Compile a family against a dataset.

    StratBiv accepts the full dataset: the stratum for the configured
    threshold is selected here and ``spec.n_studies`` is rewritten to its
    size.
    """
    stratum = None
    if spec.family == "StratBiv":
        stratum = stratum_indices(data, spec.stratbiv_threshold)
        if stratum.size == 0:
            raise ValueError(f"empty stratum: no study observes threshold "
                             f"{spec.stratbiv_threshold}")
        data = data.subset(stratum)
        spec = replace(spec, n_studies=int(stratum.size))
    elif spec.n_studies != data.n_studies:
        spec = replace(spec, n_studies=data.n_studies)
    if spec.K != data.K:
        raise ValueError(f"spec.K = {spec.K} but dataset has K = {data.K}")

    logpost_fn, loglik_fn = _jaxcore.build(spec, data)
    return CompiledModel(
        spec=spec,
        data=data,
        layout=layout_for(spec),
        stratum=stratum,
        _logpost=jax.jit(logpost_fn),
        _value_and_grad=jax.jit(jax.value_and_grad(logpost_fn)),
        _loglik=jax.jit(loglik_fn),
    )
