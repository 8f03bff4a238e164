"""Dynamic-trajectory HMC transition (multinomial NUTS).

One transition doubles a leapfrog trajectory until the generalized
U-turn criterion fires (checked on the combined tree and across subtree
boundaries), a divergence appears (energy error above 1000), or the
maximum tree depth is reached.  Draws are selected by progressive
multinomial sampling with a bias toward the newer subtree at the top
level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DIVERGENCE_ENERGY = 1000.0

__all__ = ["Metric", "NutsStats", "nuts_transition", "leapfrog",
           "DIVERGENCE_ENERGY"]


class Metric:
    """Kinetic-energy metric: diagonal or dense position covariance.

    Momentum is N(0, cov^{-1}); velocity is cov @ r, so the leapfrog
    moves in scaled coordinates.
    """

    def __init__(self, cov, dense: bool):
        self.dense = dense
        if dense:
            self.cov = np.asarray(cov, dtype=float)
            self._chol_prec = np.linalg.cholesky(np.linalg.inv(self.cov))
        else:
            self.var = np.asarray(cov, dtype=float)
            if np.any(self.var <= 0):
                raise ValueError("metric variances must be positive")

    @classmethod
    def identity(cls, dim: int, dense: bool = False) -> "Metric":
        return cls(np.eye(dim) if dense else np.ones(dim), dense)

    def sample_momentum(self, rng) -> np.ndarray:
        z = rng.standard_normal(self.dim)
        if self.dense:
            return self._chol_prec @ z
        return z / np.sqrt(self.var)

    def velocity(self, r) -> np.ndarray:
        return self.cov @ r if self.dense else self.var * r

    def kinetic(self, r) -> float:
        return 0.5 * float(r @ self.velocity(r))

    @property
    def dim(self) -> int:
        return self.cov.shape[0] if self.dense else self.var.shape[0]


def leapfrog(value_and_grad, theta, r, grad, eps, metric):
    """One leapfrog step; returns (theta, r, grad, logp)."""
    r_half = r + 0.5 * eps * grad
    theta_new = theta + eps * metric.velocity(r_half)
    logp_new, grad_new = value_and_grad(theta_new)
    r_new = r_half + 0.5 * eps * grad_new
    return theta_new, r_new, grad_new, logp_new


@dataclass
class _End:
    theta: np.ndarray
    r: np.ndarray
    grad: np.ndarray
    logp: float


@dataclass
class _Tree:
    leftmost: _End
    rightmost: _End
    r_sum: np.ndarray
    proposal: _End
    proposal_energy: float
    log_sum_weight: float
    sum_accept: float
    n_leapfrog: int
    divergent: bool
    turned: bool


@dataclass
class NutsStats:
    divergent: bool
    treedepth_hit: bool
    depth: int
    n_leapfrog: int
    accept_stat: float
    energy: float
    step_size: float


def _log_uniform(rng) -> float:
    u = rng.random()
    return math.log(u) if u > 0.0 else -math.inf


def _no_uturn(r_sum, end_minus: _End, end_plus: _End, metric) -> bool:
    return (float(r_sum @ metric.velocity(end_plus.r)) > 0
            and float(r_sum @ metric.velocity(end_minus.r)) > 0)


def _merge_turned(left: _Tree, right: _Tree, metric) -> bool:
    """Generalized U-turn over the merged tree plus the two
    cross-boundary checks on the sharp ends."""
    r_sum = left.r_sum + right.r_sum
    if not _no_uturn(r_sum, left.leftmost, right.rightmost, metric):
        return True
    if not _no_uturn(left.r_sum + right.leftmost.r,
                     left.leftmost, right.leftmost, metric):
        return True
    if not _no_uturn(left.rightmost.r + right.r_sum,
                     left.rightmost, right.rightmost, metric):
        return True
    return False


def _leaf(value_and_grad, start: _End, direction: int, eps, metric,
          h0: float) -> _Tree:
    theta, r, grad, logp = leapfrog(value_and_grad, start.theta, start.r,
                                    start.grad, direction * eps, metric)
    end = _End(theta, r, grad, logp)
    if np.isfinite(logp):
        h = -logp + metric.kinetic(r)
    else:
        h = math.inf
    divergent = not np.isfinite(h) or (h - h0) > DIVERGENCE_ENERGY
    log_weight = -math.inf if divergent else h0 - h
    accept = 0.0 if divergent else min(1.0, math.exp(min(h0 - h, 0.0)))
    return _Tree(leftmost=end, rightmost=end, r_sum=r.copy(), proposal=end,
                 proposal_energy=h, log_sum_weight=log_weight,
                 sum_accept=accept, n_leapfrog=1, divergent=divergent,
                 turned=False)


def _build_tree(value_and_grad, depth: int, start: _End, direction: int,
                eps, metric, h0: float, rng) -> _Tree:
    if depth == 0:
        return _leaf(value_and_grad, start, direction, eps, metric, h0)
    first = _build_tree(value_and_grad, depth - 1, start, direction, eps,
                        metric, h0, rng)
    if first.divergent or first.turned:
        return first
    grow_from = first.rightmost if direction > 0 else first.leftmost
    second = _build_tree(value_and_grad, depth - 1, grow_from, direction,
                         eps, metric, h0, rng)
    left, right = (first, second) if direction > 0 else (second, first)
    n_leapfrog = first.n_leapfrog + second.n_leapfrog
    sum_accept = first.sum_accept + second.sum_accept
    if second.divergent or second.turned:
        return _Tree(leftmost=left.leftmost, rightmost=right.rightmost,
                     r_sum=first.r_sum + second.r_sum,
                     proposal=first.proposal,
                     proposal_energy=first.proposal_energy,
                     log_sum_weight=first.log_sum_weight,
                     sum_accept=sum_accept, n_leapfrog=n_leapfrog,
                     divergent=second.divergent, turned=second.turned)
    log_sum_weight = np.logaddexp(first.log_sum_weight, second.log_sum_weight)
    # unbiased multinomial draw between the two halves
    if _log_uniform(rng) < second.log_sum_weight - log_sum_weight:
        proposal, energy = second.proposal, second.proposal_energy
    else:
        proposal, energy = first.proposal, first.proposal_energy
    return _Tree(leftmost=left.leftmost, rightmost=right.rightmost,
                 r_sum=first.r_sum + second.r_sum, proposal=proposal,
                 proposal_energy=energy, log_sum_weight=log_sum_weight,
                 sum_accept=sum_accept, n_leapfrog=n_leapfrog,
                 divergent=False, turned=_merge_turned(left, right, metric))


def nuts_transition(value_and_grad, theta, logp, grad, eps, metric,
                    max_treedepth, rng):
    """One NUTS draw from (theta, logp, grad); returns
    (theta', logp', grad', NutsStats)."""
    r0 = metric.sample_momentum(rng)
    h0 = -logp + metric.kinetic(r0)
    start = _End(np.asarray(theta, dtype=float), r0,
                 np.asarray(grad, dtype=float), float(logp))
    tree = _Tree(leftmost=start, rightmost=start, r_sum=r0.copy(),
                 proposal=start, proposal_energy=h0, log_sum_weight=0.0,
                 sum_accept=0.0, n_leapfrog=0, divergent=False, turned=False)
    divergent = False
    treedepth_hit = True
    depth = 0
    while depth < max_treedepth:
        direction = 1 if rng.random() < 0.5 else -1
        grow_from = tree.rightmost if direction > 0 else tree.leftmost
        sub = _build_tree(value_and_grad, depth, grow_from, direction, eps,
                          metric, h0, rng)
        tree.sum_accept += sub.sum_accept
        tree.n_leapfrog += sub.n_leapfrog
        if sub.divergent:
            divergent = True
            treedepth_hit = False
            break
        if sub.turned:
            treedepth_hit = False
            break
        # biased progressive sampling toward the new subtree
        if _log_uniform(rng) < sub.log_sum_weight - tree.log_sum_weight:
            tree.proposal = sub.proposal
            tree.proposal_energy = sub.proposal_energy
        tree.log_sum_weight = np.logaddexp(tree.log_sum_weight,
                                           sub.log_sum_weight)
        left, right = (tree, sub) if direction > 0 else (sub, tree)
        merged_turned = _merge_turned(left, right, metric)
        tree.r_sum = tree.r_sum + sub.r_sum
        if direction > 0:
            tree.rightmost = sub.rightmost
        else:
            tree.leftmost = sub.leftmost
        depth += 1
        if merged_turned:
            treedepth_hit = False
            break
    accept_stat = tree.sum_accept / max(tree.n_leapfrog, 1)
    stats = NutsStats(divergent=divergent, treedepth_hit=treedepth_hit,
                      depth=depth, n_leapfrog=tree.n_leapfrog,
                      accept_stat=accept_stat, energy=tree.proposal_energy,
                      step_size=eps)
    prop = tree.proposal
    return prop.theta, prop.logp, prop.grad, stats
