"""Joint search over embedding dimension ``d`` and cluster count ``K`` by BIC."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from .model import MicData, PriorConfig, log_likelihood_epoch, marginal_allocation
from .sampler import ChainConfig, ChainTrace, run_chain

logger = logging.getLogger(__name__)


def n_parameters(data: MicData, K: int) -> int:
    """Means and variances per epoch component, Pi, one alpha per subject, one beta per epoch."""
    E, d = data.n_epochs, data.d
    return E * K * (d + 1) + (K - 1) + data.n_subjects + E


def bic_from_loglik(loglik: float, q: int, n_obs: int) -> float:
    """``2 * loglik - q * log(n_obs)``; larger is better."""
    return 2.0 * loglik - q * np.log(n_obs)


def plugin_loglik(data: MicData, trace: ChainTrace) -> float:
    """Mixture log likelihood at posterior-mean parameters.

    Component weights are the epoch-level marginal allocation probabilities
    at the posterior means of Pi, alpha and beta.
    """
    if trace.mu is None or trace.n_draws == 0:
        raise ValueError("plug-in likelihood needs retained component parameters")
    mu = trace.mu.mean(axis=0)                              # (E, K, d)
    s2 = trace.sigma2.mean(axis=0)                          # (E, K)
    if np.any(~(s2 > 0)):
        return -np.inf
    _, w = marginal_allocation(trace.pi.mean(axis=0), trace.alpha.mean(axis=0)[data.epoch_subject],
                               trace.beta.mean(axis=0), trace.K)            # (E, K)
    comp = log_likelihood_epoch(data.X[:, :, None, :], mu[:, None], s2[:, None])   # (E, p, K)
    with np.errstate(divide="ignore"):
        return float(logsumexp(comp + np.log(w)[:, None, :], axis=-1).sum())


def bic(data: MicData, K: int, trace: ChainTrace) -> float:
    """Full-model BIC of a fitted chain; ``-inf`` for a degenerate fit."""
    ll = plugin_loglik(data, trace)
    if not np.isfinite(ll):
        return -np.inf
    return bic_from_loglik(ll, n_parameters(data, K), data.n_epochs * data.p)


_COV_PARAMS = {"spherical": lambda d: 1, "diag": lambda d: d, "full": lambda d: d * (d + 1) // 2}


def bic_surrogate(data: MicData, K: int, seed: int = 0, n_init: int = 3,
                  covariance: str = "diag") -> float:
    """BIC of independent per-epoch Gaussian mixtures (no hierarchy).

    Each epoch has its own K means, K covariances of the given type and K-1
    weights.
    """
    E, p, d = data.X.shape
    if K >= p:
        return -np.inf
    ll = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for e in range(E):
            gm = GaussianMixture(K, covariance_type=covariance, n_init=n_init,
                                 random_state=seed + e, reg_covar=1e-6)
            gm.fit(data.X[e])
            ll += gm.score(data.X[e]) * p
    q = E * (K * (d + _COV_PARAMS[covariance](d)) + K - 1)
    return bic_from_loglik(ll, q, E * p)


@dataclass
class SearchState:
    d: int = 2
    K: int = 2
    current_bic: float = -np.inf
    visited: list = field(default_factory=list)
    max_d: int = 6
    warning: str | None = None

    @property
    def path_length(self) -> int:
        return len(self.visited)

    def to_dict(self) -> dict:
        return {
            "d": self.d, "K": self.K, "current_bic": self.current_bic,
            "path_length": self.path_length, "max_d": self.max_d, "warning": self.warning,
            "visited": [{"d": d, "K": k, "bic": b} for d, k, b in self.visited],
        }


class BudgetExhausted(Exception):
    pass


def select_dk(features: Callable[[int], MicData], max_d: int, *, mode: str = "surrogate",
              max_k: int = 12, budget: int = 60, seed: int = 0, covariance: str = "diag",
              chain: ChainConfig | None = None, priors: PriorConfig | None = None,
              start: tuple[int, int] = (2, 2)) -> tuple[int, int, SearchState]:
    """Greedy (d, K) search.

    At fixed ``d``, ``K`` grows while BIC does not decrease.  If the
    selected ``K`` exceeds ``d`` the search moves to ``d = K`` starting from
    ``K - 1``; it stops once ``d >= K``.  ``features(d)`` must return the
    embedding at dimension ``d``.  A jump past ``max_d`` lands on ``max_d``,
    runs one last inner loop there and sets a warning.  Every BIC evaluation is recorded in
    ``SearchState.visited``.
    """
    if mode not in ("surrogate", "full"):
        raise ValueError(f"unknown BIC mode {mode!r}")
    chain = chain or ChainConfig(n_iterations=500, n_burnin=200, seed=seed)
    priors = priors or PriorConfig()
    cache: dict[int, MicData] = {}
    st = SearchState(d=start[0], K=start[1], max_d=max_d)

    def evaluate(d, K):
        if st.path_length >= budget:
            raise BudgetExhausted
        if d not in cache:
            cache[d] = features(d)
        data = cache[d]
        if K >= data.p:
            value = -np.inf
        elif mode == "surrogate":
            value = bic_surrogate(data, K, seed=seed, covariance=covariance)
        else:
            value = bic(data, K, run_chain(data, K, priors, chain))
        st.visited.append((d, K, float(value)))
        logger.info("BIC(d=%d, K=%d) = %.6g", d, K, value)
        return value

    try:
        st.current_bic = evaluate(st.d, st.K)
        while st.d <= max_d:
            while st.K < max_k:
                nxt = evaluate(st.d, st.K + 1)
                if not nxt >= st.current_bic:
                    break
                st.current_bic, st.K = nxt, st.K + 1
            if st.d >= st.K:
                break
            if st.K > max_d:
                st.warning = f"selected K={st.K} exceeds max_d={max_d}; returning best K at d={max_d}"
                if st.d == max_d:
                    break
            new_d = min(st.K, max_d)
            new_k = st.K - 1
            st.current_bic = evaluate(new_d, new_k)
            st.d, st.K = new_d, new_k
    except BudgetExhausted:
        st.warning = f"fit budget of {budget} exhausted; returning best so far"
    if st.warning:
        logger.warning(st.warning)
    return st.d, st.K, st
