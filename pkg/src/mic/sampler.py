"""Gibbs sampler for the three-level mixture.

One sweep updates, in order: component parameters, epoch labels, epoch
adherences, subject labels, subject adherences, population labels,
population proportions, and finally realigns labels across levels.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from .labels import PERMUTATION_CAP, apply_permutation, best_permutations, mode_labels, one_hot
from .model import MicData, MicState, PriorConfig, _log_match, log_density_terms, sample_tbeta

logger = logging.getLogger(__name__)

_ADHERENCE_CEIL = 1.0 - 1e-12


@dataclass
class ChainConfig:
    n_iterations: int = 1500
    n_burnin: int = 500
    thinning: int = 1
    seed: int = 0
    align: bool = True
    init: str = "kmeans"
    store_theta: bool = True
    permutation_cap: int = PERMUTATION_CAP

    def __post_init__(self):
        if self.n_iterations < 0 or self.n_burnin < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.n_iterations > 0 and self.n_burnin >= self.n_iterations:
            raise ValueError("n_burnin must be smaller than n_iterations")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.init not in ("kmeans", "random"):
            raise ValueError(f"unknown init strategy {self.init!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class ChainTrace:
    """Retained draws of one chain; draw ``r`` was taken at ``iterations[r]``."""

    K: int
    epoch_subject: np.ndarray
    iterations: np.ndarray
    L: np.ndarray
    C: np.ndarray
    S: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    pi: np.ndarray
    log_density: np.ndarray          # entry 0 is the initial state
    initial: MicState
    mu: np.ndarray | None = None
    sigma2: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return len(self.iterations)

    @property
    def n_subjects(self) -> int:
        return self.C.shape[1]

    def state(self, r: int) -> MicState:
        return MicState(L=self.L[r].astype(np.int64), C=self.C[r].astype(np.int64),
                        S=self.S[r].astype(np.int64), mu=self.mu[r], sigma2=self.sigma2[r],
                        alpha=self.alpha[r], beta=self.beta[r], pi=self.pi[r])


# ---------------------------------------------------------------- primitives

def sample_categorical(logw: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per leading index from unnormalized log weights on the last axis."""
    m = logw.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise FloatingPointError("categorical update with no finite log weight")
    w = np.exp(logw - m)
    cdf = np.cumsum(w, axis=-1)
    u = rng.random(logw.shape[:-1] + (1,)) * cdf[..., -1:]
    return np.minimum((cdf < u).sum(axis=-1), logw.shape[-1] - 1)


def component_loglik(data: MicData, state: MicState) -> np.ndarray:
    """``log N(X_ej; mu_ek, sigma2_ek I)`` as an (E, p, K) array."""
    X, mu, s2 = data.X, state.mu, state.sigma2
    d = X.shape[-1]
    sq = (np.sum(X**2, axis=-1)[:, :, None]
          - 2.0 * np.einsum("epd,ekd->epk", X, mu)
          + np.sum(mu**2, axis=-1)[:, None, :])
    sq = np.maximum(sq, 0.0)
    return -0.5 * d * np.log(2.0 * np.pi * s2)[:, None, :] - 0.5 * sq / s2[:, None, :]


def theta_posterior(data: MicData, L: np.ndarray, K: int, priors: PriorConfig):
    """Normal-Inverse-Gamma posterior parameters per (epoch, component).

    Returns ``(mu_n, lambda_n, xi1_n, xi2_n)`` with shapes (E,K,d), (E,K),
    (E,K), (E,K).  The isotropic likelihood contributes ``n_k * d`` scalar
    observations to the variance update.
    """
    X = data.X
    d = X.shape[-1]
    Z = one_hot(L, K)                                        # (E, p, K)
    n = Z.sum(axis=1)                                        # (E, K)
    sx = np.einsum("epk,epd->ekd", Z, X)
    sxx = np.einsum("epk,ep->ek", Z, np.sum(X**2, axis=-1))
    lam_n = priors.lambda0 + n
    mu_n = (priors.lambda0 * priors.mu0 + sx) / lam_n[..., None]
    safe_n = np.where(n > 0, n, 1.0)
    ss = np.maximum(sxx - np.sum(sx**2, axis=-1) / safe_n, 0.0)
    xbar = sx / safe_n[..., None]
    shrink = priors.lambda0 * n / lam_n * np.sum((xbar - priors.mu0) ** 2, axis=-1)
    xi1_n = priors.xi01 + 0.5 * n * d
    xi2_n = priors.xi02 + 0.5 * np.where(n > 0, ss + shrink, 0.0)
    return mu_n, lam_n, xi1_n, xi2_n


# ---------------------------------------------------------------- conditional updates

def update_theta(state: MicState, data: MicData, priors: PriorConfig, rng):
    """Conjugate draw of (mu, sigma2) for every epoch and component; empty components draw from the prior."""
    mu_n, lam_n, xi1_n, xi2_n = theta_posterior(data, state.L, state.K, priors)
    sigma2 = xi2_n / rng.gamma(xi1_n)
    mu = mu_n + np.sqrt(sigma2 / lam_n)[..., None] * rng.standard_normal(mu_n.shape)
    return mu, sigma2


def update_L(state: MicState, data: MicData, rng) -> np.ndarray:
    K = state.K
    lm, lx = _log_match(state.beta, K)                       # (E,)
    anchor = state.C[data.epoch_subject]                     # (E, p)
    prior = np.where(anchor[..., None] == np.arange(K), lm[:, None, None], lx[:, None, None])
    return sample_categorical(component_loglik(data, state) + prior, rng)


def update_beta(state: MicState, data: MicData, priors: PriorConfig, rng) -> np.ndarray:
    p = state.L.shape[1]
    m = (state.L == state.C[data.epoch_subject]).sum(axis=1)
    draw = sample_tbeta(priors.c + m, priors.d + p - m, 1.0 / state.K, rng)
    return np.minimum(draw, _ADHERENCE_CEIL)


def update_C(state: MicState, data: MicData, rng) -> np.ndarray:
    """Draw subject labels from the epoch labels (through beta) and S (through alpha).

    A subject without epochs falls back to the alpha term alone.
    """
    K = state.K
    ks = np.arange(K)
    lm_b, lx_b = _log_match(state.beta, K)
    per_epoch = np.where(state.L[..., None] == ks, lm_b[:, None, None], lx_b[:, None, None])   # (E, p, K)
    lm_a, lx_a = _log_match(state.alpha, K)
    logw = np.where(state.S[None, :, None] == ks, lm_a[:, None, None], lx_a[:, None, None])   # (n, p, K)
    for i in range(data.n_subjects):
        logw[i] += per_epoch[data.epoch_subject == i].sum(axis=0)
    return sample_categorical(logw, rng)


def update_alpha(state: MicState, priors: PriorConfig, rng) -> np.ndarray:
    p = state.C.shape[1]
    m = (state.C == state.S[None, :]).sum(axis=1)
    draw = sample_tbeta(priors.a + m, priors.b + p - m, 1.0 / state.K, rng)
    return np.minimum(draw, _ADHERENCE_CEIL)


def update_S(state: MicState, rng) -> np.ndarray:
    K = state.K
    lm, lx = _log_match(state.alpha, K)
    terms = np.where(state.C[..., None] == np.arange(K), lm[:, None, None], lx[:, None, None])  # (n, p, K)
    with np.errstate(divide="ignore"):
        logw = np.log(state.pi)[None, :] + terms.sum(axis=0)
    return sample_categorical(logw, rng)


def update_pi(state: MicState, priors: PriorConfig, rng) -> np.ndarray:
    counts = np.bincount(state.S, minlength=state.K)
    return rng.dirichlet(priors.eta + counts)


def align_labels(state: MicState, data: MicData, cap: int = PERMUTATION_CAP) -> MicState:
    """Relabel subjects toward S and epochs toward their subject.

    Subject ``i`` gets the permutation maximizing agreement of its labels
    with ``S``; it is applied to ``C_i`` and carried to the labels and
    parameters of all of its epochs, which leaves the likelihood and the
    epoch-given-subject term unchanged.  Each epoch then gets the permutation
    best matching its subject's (new) labels, applied to ``L`` and theta.
    Neither step can lower the joint density while adherences are >= 1/K.
    """
    K = state.K
    es = data.epoch_subject
    new = state.copy()

    sig = best_permutations(new.C, np.broadcast_to(new.S, new.C.shape), K, cap)   # (n, K)
    new.C = apply_permutation(new.C, sig)
    new.L = apply_permutation(new.L, sig[es])
    new.mu, new.sigma2 = _permute_components(new.mu, new.sigma2, sig[es])

    tau = best_permutations(new.L, new.C[es], K, cap)                           # (E, K)
    new.L = apply_permutation(new.L, tau)
    new.mu, new.sigma2 = _permute_components(new.mu, new.sigma2, tau)
    return new


def _permute_components(mu, sigma2, perm):
    # component k moves to slot perm[k]
    inv = np.argsort(perm, axis=-1)
    return (np.take_along_axis(mu, inv[..., None], axis=1),
            np.take_along_axis(sigma2, inv, axis=1))


# ---------------------------------------------------------------- initialization

def initialize(data: MicData, K: int, priors: PriorConfig, rng,
               strategy: str = "kmeans", cap: int = PERMUTATION_CAP) -> MicState:
    E, p, _ = data.X.shape
    n = data.n_subjects
    es = data.epoch_subject
    if strategy == "kmeans":
        L = np.empty((E, p), dtype=np.int64)
        for e in range(E):
            km = KMeans(n_clusters=K, n_init=4, random_state=int(rng.integers(2**31 - 1)))
            L[e] = km.fit_predict(data.X[e])
    else:
        L = rng.integers(0, K, size=(E, p))

    C = np.empty((n, p), dtype=np.int64)
    for i in range(n):
        ep = np.flatnonzero(es == i)
        if ep.size == 0:
            C[i] = rng.integers(0, K, size=p)
            continue
        ref = L[ep[0]]
        for _ in range(3):
            L[ep] = apply_permutation(L[ep], best_permutations(L[ep], np.broadcast_to(ref, L[ep].shape), K, cap))
            ref = mode_labels(L[ep], K)
        C[i] = ref

    S = C[0]
    for _ in range(3):
        sig = best_permutations(C, np.broadcast_to(S, C.shape), K, cap)
        C = apply_permutation(C, sig)
        L = apply_permutation(L, sig[es])
        S = mode_labels(C, K)

    mu_n, lam_n, xi1_n, xi2_n = theta_posterior(data, L, K, priors)
    start = 0.5 * (1.0 + 1.0 / K)
    return MicState(L=L, C=C, S=S, mu=mu_n, sigma2=xi2_n / (xi1_n + 1.0),
                    alpha=np.full(n, start), beta=np.full(E, start), pi=np.full(K, 1.0 / K))


# ---------------------------------------------------------------- driver

def sweep(state: MicState, data: MicData, priors: PriorConfig, rng, align=True,
          cap: int = PERMUTATION_CAP) -> MicState:
    s = state.copy()
    s.mu, s.sigma2 = update_theta(s, data, priors, rng)
    s.L = update_L(s, data, rng)
    s.beta = update_beta(s, data, priors, rng)
    s.C = update_C(s, data, rng)
    s.alpha = update_alpha(s, priors, rng)
    s.S = update_S(s, rng)
    s.pi = update_pi(s, priors, rng)
    if align:
        s = align_labels(s, data, cap)
    return s


def run_chain(data: MicData, K: int, priors: PriorConfig, cfg: ChainConfig,
              initial: MicState | None = None) -> ChainTrace:
    """Run one chain; identical inputs and seed give identical traces."""
    if K < 2:
        raise ValueError("K must be >= 2")
    if priors.mu0 is None or priors.xi02 is None:
        priors = priors.resolve(data.X)
    rng = np.random.default_rng(cfg.seed)
    state = initial.copy() if initial is not None else initialize(data, K, priors, rng, cfg.init, cfg.permutation_cap)

    keep = [it for it in range(1, cfg.n_iterations + 1)
            if it > cfg.n_burnin and (it - cfg.n_burnin) % cfg.thinning == 0]
    M, E, p, d, n = len(keep), data.n_epochs, data.p, data.d, data.n_subjects
    lab = np.int8 if K < 127 else np.int16
    tr = ChainTrace(
        K=K, epoch_subject=data.epoch_subject.copy(), iterations=np.array(keep, dtype=np.int64),
        L=np.empty((M, E, p), lab), C=np.empty((M, n, p), lab), S=np.empty((M, p), lab),
        alpha=np.empty((M, n)), beta=np.empty((M, E)), pi=np.empty((M, K)),
        log_density=np.empty(cfg.n_iterations + 1), initial=state.copy(),
        mu=np.empty((M, E, K, d)) if cfg.store_theta else None,
        sigma2=np.empty((M, E, K)) if cfg.store_theta else None,
    )
    tr.log_density[0] = _checked_log_density(state, data, priors, 0)
    r = 0
    for it in range(1, cfg.n_iterations + 1):
        state = sweep(state, data, priors, rng, cfg.align, cfg.permutation_cap)
        tr.log_density[it] = _checked_log_density(state, data, priors, it)
        if r < M and keep[r] == it:
            tr.L[r], tr.C[r], tr.S[r] = state.L, state.C, state.S
            tr.alpha[r], tr.beta[r], tr.pi[r] = state.alpha, state.beta, state.pi
            if cfg.store_theta:
                tr.mu[r], tr.sigma2[r] = state.mu, state.sigma2
            r += 1
    tr.extra["final"] = state
    tr.extra["priors"] = priors
    return tr


def _checked_log_density(state, data, priors, it):
    terms = log_density_terms(state, data, priors)
    total = sum(terms.values())
    if not np.isfinite(total):
        detail = ", ".join(f"{k}={v:.6g}" for k, v in terms.items())
        raise FloatingPointError(f"non-finite joint log density at iteration {it}: {detail}")
    return total
