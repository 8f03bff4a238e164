"""Convergence diagnostics: split R-hat and rank-normalized ESS.

Implements the rank-normalized split-chain potential scale reduction
factor and the bulk/tail effective sample sizes with Geyer's initial
monotone sequence truncation.  All functions take arrays shaped
(n_chains, n_draws).

Conventions for undefined values:
  * R-hat is NaN when only one chain is available (between-chain
    variance is undefined).
  * ESS and R-hat are NaN for a constant parameter (zero variance).
"""

from __future__ import annotations

import numpy as np
from scipy import stats
from scipy.special import ndtri

__all__ = ["split_rhat", "ess_bulk", "ess_tail", "ess_mean"]


def _split_chains(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    half = x.shape[1] // 2
    return np.vstack([x[:, :half], x[:, half:2 * half]])


def _z_scale(x: np.ndarray) -> np.ndarray:
    """Rank-normalize (fractional offsets, average ties) to a standard
    normal scale."""
    ranks = stats.rankdata(x, method="average").reshape(x.shape)
    return ndtri((ranks - 0.375) / (x.size + 0.25))


def _is_constant(x: np.ndarray) -> bool:
    return bool(np.all(x == x.flat[0]))


def _autocov(seq: np.ndarray) -> np.ndarray:
    """Biased autocovariance (normalized by n) via FFT."""
    n = seq.shape[0]
    centered = seq - seq.mean()
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n].real
    return acov / n


def _rhat_sequences(seqs: np.ndarray) -> float:
    m, n = seqs.shape
    if n < 2:
        return np.nan
    chain_means = seqs.mean(axis=1)
    within = seqs.var(axis=1, ddof=1).mean()
    if within == 0.0:
        return np.nan
    var_plus = within * (n - 1) / n + np.var(chain_means, ddof=1)
    return float(np.sqrt(var_plus / within))


def split_rhat(x: np.ndarray) -> float:
    """Rank-normalized split R-hat (max of bulk and folded variants).

    NaN when fewer than two chains are supplied or the parameter is
    constant.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected (n_chains, n_draws) array")
    if x.shape[0] < 2:
        return np.nan
    if _is_constant(x) or not np.all(np.isfinite(x)):
        return np.nan
    split = _split_chains(x)
    bulk = _rhat_sequences(_z_scale(split))
    folded = np.abs(split - np.median(split))
    tail = _rhat_sequences(_z_scale(folded))
    return float(np.nanmax([bulk, tail]))


def _ess_sequences(seqs: np.ndarray) -> float:
    """ESS of already-transformed sequences (n_seq, n_draw)."""
    m, n = seqs.shape
    if n < 4 or not np.all(np.isfinite(seqs)):
        return np.nan
    if _is_constant(seqs):
        return np.nan
    acov = np.array([_autocov(s) for s in seqs])
    chain_means = seqs.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += np.var(chain_means, ddof=1)
    if var_plus == 0.0:
        return np.nan

    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < (n - 3) and (rho_even + rho_odd) > 0.0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if (rho_even + rho_odd) >= 0.0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0.0:
        rho[max_t + 1] = rho_even

    # Geyer initial monotone sequence: pair sums non-increasing
    t = 1
    while t <= max_t - 2:
        if (rho[t + 1] + rho[t + 2]) > (rho[t - 1] + rho[t]):
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2

    total = m * n
    tau = -1.0 + 2.0 * rho[: max_t + 1].sum() + rho[max_t + 1]
    # cap: no more than log10(total) superefficiency
    tau = max(tau, 1.0 / np.log10(total))
    return float(total / tau)


def ess_bulk(x: np.ndarray) -> float:
    """Rank-normalized bulk effective sample size."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected (n_chains, n_draws) array")
    if _is_constant(x):
        return np.nan
    return _ess_sequences(_z_scale(_split_chains(x)))


def ess_tail(x: np.ndarray) -> float:
    """Tail effective sample size: minimum ESS of the 5% and 95%
    quantile indicator sequences."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected (n_chains, n_draws) array")
    if _is_constant(x):
        return np.nan
    out = []
    for prob in (0.05, 0.95):
        q = np.quantile(x, prob)
        indicator = (x <= q).astype(float)
        out.append(_ess_sequences(_split_chains(indicator)))
    return float(np.nanmin(out)) if not np.all(np.isnan(out)) else np.nan


def ess_mean(x: np.ndarray) -> float:
    """Plain (non-rank-normalized) ESS of the mean; used for
    Monte-Carlo standard errors."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected (n_chains, n_draws) array")
    if _is_constant(x):
        return np.nan
    return _ess_sequences(_split_chains(x))
