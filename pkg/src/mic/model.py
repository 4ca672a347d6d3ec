"""Three-level mixture model: epoch labels L, subject labels C, population labels S.

Labels are 0-based integers.  Epochs of all subjects are stacked along one
axis of length ``E``; ``epoch_subject[e]`` maps epoch ``e`` to its subject.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import special, stats


def _check_adherence(value, K, name):
    v = np.asarray(value, dtype=float)
    if np.any(v < 1.0 / K - 1e-12) or np.any(v > 1.0 + 1e-12):
        raise ValueError(f"{name} must lie in [1/K, 1] = [{1 / K:.4g}, 1], got {value}")


def nu_c(k, c, beta, K):
    """Pr(L = k | C = c): ``beta`` if k == c, else ``(1 - beta)/(K - 1)``."""
    _check_adherence(beta, K, "beta")
    return np.where(np.asarray(k) == np.asarray(c), beta, (1.0 - np.asarray(beta)) / (K - 1))


def nu_s(k, s, alpha, K):
    """Pr(C = k | S = s): same form as :func:`nu_c` with ``alpha``."""
    _check_adherence(alpha, K, "alpha")
    return np.where(np.asarray(k) == np.asarray(s), alpha, (1.0 - np.asarray(alpha)) / (K - 1))


def _log_match(adherence, K):
    """(log prob of a match, log prob of each mismatch) for adherence values."""
    a = np.asarray(adherence, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(a), np.log1p(-a) - np.log(K - 1)


def log_likelihood_epoch(x, mu, sigma2):
    """Log density of ``N(mu, sigma2 * I_d)`` at ``x`` (broadcasts over leading axes)."""
    x, mu = np.asarray(x, dtype=float), np.asarray(mu, dtype=float)
    d = x.shape[-1]
    sq = np.sum((x - mu) ** 2, axis=-1)
    return -0.5 * d * np.log(2.0 * np.pi * sigma2) - 0.5 * sq / sigma2


def marginal_allocation(pi, alpha, beta, K=None):
    """Allocation probabilities after integrating out the upper-level labels.

    Returns
    -------
    subject : ndarray (K,)
        ``Pr(C_ij = k | Pi) = pi_k alpha + (1 - pi_k)(1 - alpha)/(K - 1)``
    epoch : ndarray (K,)
        ``Pr(L_ij(t) = k | Pi) = beta p_k + (1 - p_k)(1 - beta)/(K - 1)``
    """
    pi = np.asarray(pi, dtype=float)
    K = K or pi.shape[-1]
    a = np.asarray(alpha, dtype=float)[..., None]
    b = np.asarray(beta, dtype=float)[..., None]
    p_sub = pi * a + (1.0 - pi) * (1.0 - a) / (K - 1)
    p_ep = b * p_sub + (1.0 - p_sub) * (1.0 - b) / (K - 1)
    return p_sub, p_ep


def _count_logprob(n_match, n_miss, log_match, log_miss):
    # 0 * -inf must count as 0 when adherence is exactly 1
    with np.errstate(invalid="ignore"):
        return float(np.sum(np.where(n_match > 0, n_match * log_match, 0.0)
                            + np.where(n_miss > 0, n_miss * log_miss, 0.0)))


# ---------------------------------------------------------------- truncated Beta

def tbeta_logpdf(x, a, b, lower):
    """Log density of Beta(a, b) truncated to ``[lower, 1]``."""
    x = np.asarray(x, dtype=float)
    out = stats.beta.logpdf(x, a, b) - np.log(stats.beta.sf(lower, a, b))
    return np.where((x >= lower) & (x <= 1.0), out, -np.inf)


def _tbeta_bisect(a, b, lower, u):
    # solve I_x(a, b) = F(lower) + u (1 - F(lower)) on [lower, 1]
    lo, hi = np.full_like(u, lower), np.ones_like(u)
    F0 = special.betainc(a, b, lower)
    target = F0 + u * (1.0 - F0)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        below = special.betainc(a, b, mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def sample_tbeta(a, b, lower, rng, size=None):
    """Draw from Beta(a, b) truncated to ``[lower, 1]`` by inverse CDF.

    Inverts through the survival function so upper-tail mass is resolved
    accurately; falls back to bisection on the regularized incomplete beta
    where the inversion is not finite or leaves the support.
    """
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    shape = a.shape if size is None else size
    a, b = np.broadcast_to(a, shape), np.broadcast_to(b, shape)
    u = rng.random(shape)
    tail = special.betaincc(a, b, lower)
    with np.errstate(all="ignore"):
        x = stats.beta.isf(u * tail, a, b)
    bad = ~np.isfinite(x) | (x < lower) | (x > 1.0) | (tail <= 0)
    if np.any(bad):
        x = np.where(bad, _tbeta_bisect(a, b, lower, u), x)
    return np.clip(x, lower, 1.0)


# ---------------------------------------------------------------- state & priors

@dataclass
class PriorConfig:
    """Hyperparameters; ``None`` entries are filled from the data by :meth:`resolve`."""

    eta: float = 1.0
    mu0: np.ndarray | None = None
    lambda0: float = 0.01
    xi01: float = 2.0
    xi02: float | None = None
    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    d: float = 1.0

    def resolve(self, X: np.ndarray) -> "PriorConfig":
        """Fill data-scaled defaults from stacked features ``X`` of shape (E, p, d)."""
        mu0 = self.mu0
        if mu0 is None:
            mu0 = X.reshape(-1, X.shape[-1]).mean(axis=0)
        xi02 = self.xi02
        if xi02 is None:
            # average per-coordinate variance of the rows within each epoch
            xi02 = 0.1 * float(X.var(axis=1).mean())
            xi02 = max(xi02, 1e-8)
        out = replace(self, mu0=np.asarray(mu0, dtype=float), xi02=float(xi02))
        out.validate()
        return out

    def validate(self):
        for name in ("eta", "lambda0", "xi01", "xi02", "a", "b", "c", "d"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"prior hyperparameter {name} must be positive, got {v}")

    def to_dict(self) -> dict:
        out = asdict(self)
        if out["mu0"] is not None:
            out["mu0"] = np.asarray(out["mu0"]).tolist()
        return out

    @classmethod
    def from_dict(cls, obj: dict | None) -> "PriorConfig":
        obj = dict(obj or {})
        if obj.get("mu0") is not None:
            obj["mu0"] = np.asarray(obj["mu0"], dtype=float)
        return cls(**obj)


@dataclass
class MicData:
    """Stacked eigen-Laplacian features.

    X : (E, p, d) rows of every epoch of every subject.
    epoch_subject : (E,) subject index of each epoch.
    """

    X: np.ndarray
    epoch_subject: np.ndarray
    n_subjects: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.epoch_subject = np.asarray(self.epoch_subject, dtype=np.int64)
        if self.X.ndim != 3 or self.epoch_subject.shape != (self.X.shape[0],):
            raise ValueError("X must be (E, p, d) with one subject index per epoch")

    @classmethod
    def from_subjects(cls, blocks: list[np.ndarray]) -> "MicData":
        """Stack per-subject ``(T_i, p, d)`` arrays."""
        p = {b.shape[1:] for b in blocks if len(b)}
        if len(p) > 1:
            raise ValueError(f"inconsistent (p, d) across subjects: {p}")
        idx = np.concatenate([np.full(len(b), i) for i, b in enumerate(blocks)]).astype(np.int64)
        return cls(np.concatenate(blocks, axis=0), idx, len(blocks))

    @property
    def n_epochs(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[2]

    @property
    def epochs_per_subject(self) -> np.ndarray:
        return np.bincount(self.epoch_subject, minlength=self.n_subjects)


@dataclass
class MicState:
    L: np.ndarray        # (E, p)
    C: np.ndarray        # (n, p)
    S: np.ndarray        # (p,)
    mu: np.ndarray       # (E, K, d)
    sigma2: np.ndarray   # (E, K)
    alpha: np.ndarray    # (n,)
    beta: np.ndarray     # (E,)
    pi: np.ndarray       # (K,)

    @property
    def K(self) -> int:
        return self.pi.shape[0]

    def copy(self) -> "MicState":
        return MicState(**{k: np.array(v, copy=True) for k, v in self.__dict__.items()})

    def permuted(self, perm) -> "MicState":
        """Relabel every level with ``new = perm[old]``, carrying theta and Pi along."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return MicState(
            L=perm[self.L], C=perm[self.C], S=perm[self.S],
            mu=self.mu[:, inv], sigma2=self.sigma2[:, inv],
            alpha=self.alpha.copy(), beta=self.beta.copy(), pi=self.pi[inv],
        )


def log_density_terms(state: MicState, data: MicData, priors: PriorConfig) -> dict[str, float]:
    """Level-wise terms of the joint log density ``log p(X, L, C, S, theta, alpha, beta, Pi)``."""
    K = state.K
    X, es = data.X, data.epoch_subject
    d = X.shape[-1]
    E = X.shape[0]
    e_idx = np.arange(E)[:, None]

    mu_l = state.mu[e_idx, state.L]                          # (E, p, d)
    s2_l = state.sigma2[e_idx, state.L]                      # (E, p)
    lik = log_likelihood_epoch(X, mu_l, s2_l).sum()

    lm, lx = _log_match(state.beta, K)
    agree_L = (state.L == state.C[es]).sum(axis=1)
    p = X.shape[1]
    prior_L = _count_logprob(agree_L, p - agree_L, lm, lx)

    lm, lx = _log_match(state.alpha, K)
    agree_C = (state.C == state.S[None, :]).sum(axis=1)
    prior_C = _count_logprob(agree_C, p - agree_C, lm, lx)

    prior_S = float(np.sum(np.log(state.pi[state.S])))

    ig = stats.invgamma.logpdf(state.sigma2, priors.xi01, scale=priors.xi02).sum()
    mu_dev = np.sum((state.mu - priors.mu0) ** 2, axis=-1)
    nrm = -0.5 * d * np.log(2 * np.pi * state.sigma2 / priors.lambda0) - 0.5 * priors.lambda0 * mu_dev / state.sigma2
    prior_theta = float(ig + nrm.sum())

    lower = 1.0 / K
    prior_alpha = float(tbeta_logpdf(state.alpha, priors.a, priors.b, lower).sum())
    prior_beta = float(tbeta_logpdf(state.beta, priors.c, priors.d, lower).sum())
    prior_pi = float(stats.dirichlet.logpdf(np.clip(state.pi, 1e-300, None), np.full(K, priors.eta)))

    return {
        "likelihood": float(lik),
        "L|C": prior_L,
        "C|S": prior_C,
        "S|Pi": prior_S,
        "theta": prior_theta,
        "alpha": prior_alpha,
        "beta": prior_beta,
        "Pi": prior_pi,
    }


def log_joint(state: MicState, data: MicData, priors: PriorConfig) -> float:
    return float(sum(log_density_terms(state, data, priors).values()))
