import itertools

import numpy as np
import pytest
from scipy import integrate, stats

from mic.labels import best_permutations, permutations
from mic.model import MicData, MicState, PriorConfig, log_density_terms, log_joint, nu_c, nu_s
from mic.sampler import (
    ChainConfig,
    align_labels,
    run_chain,
    sample_categorical,
    sweep,
    theta_posterior,
    update_alpha,
    update_beta,
    update_C,
    update_L,
    update_pi,
    update_S,
    update_theta,
)

PRIORS = PriorConfig(eta=1.0, mu0=np.zeros(2), lambda0=0.5, xi01=3.0, xi02=2.0)


def _within_se(freq, prob, n, k=3.0):
    se = np.sqrt(prob * (1 - prob) / n)
    return np.all(np.abs(freq - prob) <= k * se + 1e-12)


def _state(E, n, p, K, d, rng, **kw):
    base = dict(
        L=rng.integers(0, K, size=(E, p)), C=rng.integers(0, K, size=(n, p)), S=rng.integers(0, K, size=p),
        mu=rng.normal(size=(E, K, d)), sigma2=rng.gamma(2.0, size=(E, K)),
        alpha=np.full(n, 0.7), beta=np.full(E, 0.7), pi=np.full(K, 1.0 / K),
    )
    base.update(kw)
    return MicState(**base)


# ---------------------------------------------------------------- categorical

def test_sample_categorical_frequencies():
    rng = np.random.default_rng(0)
    prob = np.array([0.5, 0.3, 0.2])
    draws = sample_categorical(np.tile(np.log(prob), (100_000, 1)), rng)
    assert _within_se(np.bincount(draws, minlength=3) / 1e5, prob, 1e5)


def test_sample_categorical_handles_minus_inf():
    draws = sample_categorical(np.tile([-np.inf, 0.0, -np.inf], (1000, 1)), np.random.default_rng(1))
    assert np.all(draws == 1)
    with pytest.raises(FloatingPointError):
        sample_categorical(np.full((2, 3), -np.inf), np.random.default_rng(1))


# ---------------------------------------------------------------- epoch labels

def _single_row_data(x, p, K):
    X = np.broadcast_to(x, (1, p, len(x))).copy()
    return MicData(X, np.zeros(1, dtype=int), 1)


def test_update_L_matches_enumeration():
    n, K = 100_000, 2
    rng = np.random.default_rng(2)
    x = np.array([0.3, -0.2])
    data = _single_row_data(x, n, K)
    mu = np.array([[[0.0, 0.0], [1.0, -0.5]]])
    s2 = np.array([[0.4, 0.9]])
    st = _state(1, 1, n, K, 2, rng, mu=mu, sigma2=s2, C=np.zeros((1, n), dtype=int), beta=np.array([0.8]))
    draws = update_L(st, data, rng)
    lik = np.array([stats.multivariate_normal(mu[0, k], s2[0, k] * np.eye(2)).pdf(x) for k in range(K)])
    w = lik * nu_c(np.arange(K), 0, 0.8, K)
    assert _within_se(np.bincount(draws[0], minlength=K) / n, w / w.sum(), n)


def test_update_L_flat_prior_follows_likelihood():
    n, K = 100_000, 3
    rng = np.random.default_rng(3)
    x = np.array([0.1, 0.4])
    data = _single_row_data(x, n, K)
    st = _state(1, 1, n, K, 2, rng, C=np.zeros((1, n), dtype=int), beta=np.array([1 / 3]))
    lik = np.array([stats.multivariate_normal(st.mu[0, k], st.sigma2[0, k] * np.eye(2)).pdf(x) for k in range(K)])
    draws = update_L(st, data, rng)
    assert _within_se(np.bincount(draws[0], minlength=K) / n, lik / lik.sum(), n)


def test_update_L_uninformative_likelihood_follows_prior():
    n, K = 100_000, 3
    rng = np.random.default_rng(4)
    data = _single_row_data(np.array([0.1, 0.4]), n, K)
    st = _state(1, 1, n, K, 2, rng, C=np.ones((1, n), dtype=int), beta=np.array([0.6]),
                mu=np.zeros((1, K, 2)), sigma2=np.full((1, K), 1e12))
    draws = update_L(st, data, rng)
    assert _within_se(np.bincount(draws[0], minlength=K) / n, nu_c(np.arange(K), 1, 0.6, K), n)


# ---------------------------------------------------------------- subject labels

def test_update_C_matches_enumeration():
    # K=3, two epochs of one subject; many channels give independent draws
    K, p = 3, 100_000
    rng = np.random.default_rng(5)
    L = np.stack([np.zeros(p, dtype=int), np.ones(p, dtype=int)])
    beta, alpha = np.array([0.8, 0.6]), np.array([0.7])
    st = _state(2, 1, p, K, 2, rng, L=L, S=np.full(p, 2), beta=beta, alpha=alpha)
    data = MicData(np.zeros((2, p, 2)), np.zeros(2, dtype=int), 1)
    draws = update_C(st, data, rng)[0]
    w = np.array([nu_c(0, k, beta[0], K) * nu_c(1, k, beta[1], K) * nu_s(k, 2, alpha[0], K) for k in range(K)])
    assert _within_se(np.bincount(draws, minlength=K) / p, w / w.sum(), p)


def test_update_C_without_epochs_reduces_to_alpha_row():
    K, p = 3, 100_000
    rng = np.random.default_rng(6)
    # subject 1 owns no epoch
    st = _state(1, 2, p, K, 2, rng, L=np.zeros((1, p), dtype=int), S=np.zeros(p, dtype=int), alpha=np.array([0.7, 0.5]))
    data = MicData(np.zeros((1, p, 2)), np.zeros(1, dtype=int), 2)
    draws = update_C(st, data, rng)[1]
    assert _within_se(np.bincount(draws, minlength=K) / p, nu_s(np.arange(K), 0, 0.5, K), p)


def test_update_C_concordant_epochs():
    K, p, T = 3, 50_000, 3
    rng = np.random.default_rng(7)
    b = 0.6
    st = _state(T, 1, p, K, 2, rng, L=np.full((T, p), 2), beta=np.full(T, b), alpha=np.array([1 / 3]))
    data = MicData(np.zeros((T, p, 2)), np.zeros(T, dtype=int), 1)
    draws = update_C(st, data, rng)[0]
    w = np.array([b**T if k == 2 else ((1 - b) / (K - 1)) ** T for k in range(K)])
    freq = np.bincount(draws, minlength=K) / p
    assert np.argmax(freq) == 2
    assert _within_se(freq, w / w.sum(), p)


# ---------------------------------------------------------------- population labels

def test_update_S_matches_enumeration():
    K, n, p = 2, 3, 100_000
    rng = np.random.default_rng(8)
    C = np.array([[0] * p, [1] * p, [0] * p])
    alpha, pi = np.array([0.9, 0.6, 0.55]), np.array([0.3, 0.7])
    st = _state(1, n, p, K, 2, rng, C=C, alpha=alpha, pi=pi)
    draws = update_S(st, rng)
    w = np.array([pi[k] * np.prod([nu_s(C[i, 0], k, alpha[i], K) for i in range(n)]) for k in range(K)])
    assert _within_se(np.bincount(draws, minlength=K) / p, w / w.sum(), p)


def test_update_S_single_uninformative_subject():
    K, p = 3, 100_000
    rng = np.random.default_rng(9)
    pi = np.array([0.2, 0.5, 0.3])
    st = _state(1, 1, p, K, 2, rng, alpha=np.array([1 / 3]), pi=pi)
    draws = update_S(st, rng)
    assert _within_se(np.bincount(draws, minlength=K) / p, pi, p)


def test_update_S_unanimous_perfect_adherence():
    K, n, p = 3, 4, 50
    rng = np.random.default_rng(10)
    st = _state(1, n, p, K, 2, rng, C=np.full((n, p), 1), alpha=np.ones(n))
    assert np.all(update_S(st, rng) == 1)


# ---------------------------------------------------------------- component parameters

def test_theta_empty_component_is_prior():
    rng = np.random.default_rng(11)
    data = MicData(rng.normal(size=(1, 6, 2)), np.zeros(1, dtype=int), 1)
    mu_n, lam_n, xi1, xi2 = theta_posterior(data, np.zeros((1, 6), dtype=int), 2, PRIORS)
    np.testing.assert_allclose(mu_n[0, 1], PRIORS.mu0)
    assert lam_n[0, 1] == PRIORS.lambda0 and xi1[0, 1] == PRIORS.xi01 and xi2[0, 1] == PRIORS.xi02


def test_theta_noninformative_limit():
    x = np.array([[[0.7, -1.3]]])
    data = MicData(x, np.zeros(1, dtype=int), 1)
    pr = PriorConfig(mu0=np.zeros(2), lambda0=1e-10, xi01=2.0, xi02=1.0)
    mu_n, *_ = theta_posterior(data, np.zeros((1, 1), dtype=int), 2, pr)
    np.testing.assert_allclose(mu_n[0, 0], x[0, 0], atol=1e-8)


def test_theta_moments_match_grid_quadrature():
    # d = 1 so the posterior of (mu, sigma2) lives on a 2-d grid
    x = np.array([0.4, 1.1, -0.2, 0.9, 0.5])
    pr = PriorConfig(mu0=np.array([0.0]), lambda0=0.5, xi01=3.0, xi02=2.0)
    data = MicData(x[None, :, None], np.zeros(1, dtype=int), 1)
    mu_n, lam_n, xi1, xi2 = theta_posterior(data, np.zeros((1, 5), dtype=int), 1, pr)

    mus = np.linspace(-3, 4, 1401)
    s2s = np.linspace(1e-3, 6, 3000)
    M, V = np.meshgrid(mus, s2s, indexing="ij")
    logp = (stats.norm.logpdf(x[None, None, :], M[..., None], np.sqrt(V)[..., None]).sum(-1)
            + stats.norm.logpdf(M, 0.0, np.sqrt(V / 0.5)) + stats.invgamma.logpdf(V, 3.0, scale=2.0))
    w = np.exp(logp - logp.max())
    Z = integrate.trapezoid(integrate.trapezoid(w, s2s, axis=1), mus)
    Emu = integrate.trapezoid(integrate.trapezoid(w * M, s2s, axis=1), mus) / Z
    Es2 = integrate.trapezoid(integrate.trapezoid(w * V, s2s, axis=1), mus) / Z
    assert abs(mu_n[0, 0, 0] - Emu) < 1e-3
    assert abs(xi2[0, 0] / (xi1[0, 0] - 1) - Es2) < 1e-3

    # and the sampler draws from that posterior
    E = 200_000
    big = MicData(np.broadcast_to(x[None, :, None], (E, 5, 1)).copy(), np.zeros(E, dtype=int), 1)
    st = _state(E, 1, 5, 2, 1, np.random.default_rng(12), L=np.zeros((E, 5), dtype=int))
    mu, s2 = update_theta(st, big, pr, np.random.default_rng(13))
    se_mu = mu[:, 0, 0].std() / np.sqrt(E)
    assert abs(mu[:, 0, 0].mean() - Emu) < 4 * se_mu
    assert abs(np.median(s2[:, 0]) - stats.invgamma(xi1[0, 0], scale=xi2[0, 0]).median()) < 0.01


# ---------------------------------------------------------------- adherences

def _quad_mean_var(logf, lo):
    Z = integrate.quad(lambda a: np.exp(logf(a)), lo, 1)[0]
    m = integrate.quad(lambda a: a * np.exp(logf(a)), lo, 1)[0] / Z
    v = integrate.quad(lambda a: (a - m) ** 2 * np.exp(logf(a)), lo, 1)[0] / Z
    return m, v


def test_update_alpha_moments_match_quadrature():
    # K=2, p=4, m=2, a=b=1: density proportional to a^2 (1-a)^2 on [1/2, 1]
    n = 1_000_000
    rng = np.random.default_rng(14)
    S = np.array([0, 0, 1, 1])
    C = np.broadcast_to(np.array([0, 1, 1, 0]), (n, 4))
    st = MicState(L=np.zeros((1, 4), int), C=C, S=S, mu=np.zeros((1, 2, 1)), sigma2=np.ones((1, 2)),
                  alpha=np.full(n, 0.7), beta=np.full(1, 0.7), pi=np.full(2, 0.5))
    draws = update_alpha(st, PriorConfig(a=1.0, b=1.0), rng)
    m, v = _quad_mean_var(lambda a: 2 * np.log(a) + 2 * np.log1p(-a), 0.5)
    assert draws.min() >= 0.5
    assert abs(draws.mean() - m) < 1e-3 and abs(draws.var() - v) < 1e-3


def test_update_beta_moments_match_quadrature():
    E, K = 1_000_000, 3
    rng = np.random.default_rng(15)
    L = np.broadcast_to(np.array([0, 1, 2, 2, 1]), (E, 5))
    C = np.array([[0, 1, 2, 0, 0]])          # m = 3 of p = 5
    st = MicState(L=L, C=C, S=np.zeros(5, int), mu=np.zeros((E, K, 1)), sigma2=np.ones((E, K)),
                  alpha=np.full(1, 0.7), beta=np.full(E, 0.7), pi=np.full(K, 1 / K))
    data = MicData(np.zeros((E, 5, 1)), np.zeros(E, dtype=int), 1)
    pr = PriorConfig(c=2.0, d=1.5)
    draws = update_beta(st, data, pr, rng)
    m, v = _quad_mean_var(lambda b: (2 + 3 - 1) * np.log(b) + (1.5 + 2 - 1) * np.log1p(-b), 1 / K)
    assert draws.min() >= 1 / K
    assert abs(draws.mean() - m) < 1e-3 and abs(draws.var() - v) < 1e-3


def test_perfect_agreement_concentrates_alpha():
    p, n = 200, 2000
    C = np.zeros((n, p), dtype=int)
    st = MicState(L=np.zeros((1, p), int), C=C, S=np.zeros(p, int), mu=np.zeros((1, 3, 1)),
                  sigma2=np.ones((1, 3)), alpha=np.full(n, 0.7), beta=np.full(1, 0.7), pi=np.full(3, 1 / 3))
    assert update_alpha(st, PriorConfig(), np.random.default_rng(16)).mean() > 0.99


def test_update_pi_dirichlet_mean():
    rng = np.random.default_rng(17)
    S = np.repeat([0, 1, 2], [5, 3, 2])
    st = MicState(L=np.zeros((1, 10), int), C=np.zeros((1, 10), int), S=S, mu=np.zeros((1, 3, 1)),
                  sigma2=np.ones((1, 3)), alpha=np.ones(1), beta=np.ones(1), pi=np.full(3, 1 / 3))
    draws = np.array([update_pi(st, PriorConfig(eta=1.0), rng) for _ in range(100_000)])
    target = np.array([6, 4, 3]) / 13
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - target) < 3 * se)
    big = np.array([update_pi(st, PriorConfig(eta=1e6), rng) for _ in range(100)])
    np.testing.assert_allclose(big.mean(axis=0), 1 / 3, atol=1e-3)


def test_update_pi_without_labels_is_prior():
    rng = np.random.default_rng(18)
    st = MicState(L=np.zeros((1, 0), int), C=np.zeros((1, 0), int), S=np.zeros(0, int), mu=np.zeros((1, 3, 1)),
                  sigma2=np.ones((1, 3)), alpha=np.ones(1), beta=np.ones(1), pi=np.full(3, 1 / 3))
    draws = np.array([update_pi(st, PriorConfig(eta=2.0), rng) for _ in range(20_000)])
    np.testing.assert_allclose(draws.mean(axis=0), 1 / 3, atol=0.01)


# ---------------------------------------------------------------- alignment

def test_best_permutation_brute_force_k4():
    rng = np.random.default_rng(19)
    for _ in range(200):
        a, b = rng.integers(0, 4, size=(2, 15))
        perm = best_permutations(a, b, 4)
        best = max(np.sum(np.array(q)[a] == b) for q in itertools.permutations(range(4)))
        assert np.sum(perm[a] == b) == best


def test_best_permutation_identity_and_shift():
    S = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    np.testing.assert_array_equal(best_permutations(S, S, 4), np.arange(4))
    shifted = (S + 1) % 4
    perm = best_permutations(shifted, S, 4)
    np.testing.assert_array_equal(perm[shifted], S)


def test_best_permutation_above_cap_uses_assignment():
    rng = np.random.default_rng(20)
    S = rng.integers(0, 9, size=60)
    sh = (S + 3) % 9
    perm = best_permutations(sh, S, 9, cap=8)
    np.testing.assert_array_equal(perm[sh], S)


def test_permutations_count():
    assert permutations(4).shape == (24, 4)
    np.testing.assert_array_equal(permutations(4)[0], np.arange(4))


def _toy_chain_inputs(K=3, n=2, T=3, p=8, d=2, seed=21):
    rng = np.random.default_rng(seed)
    es = np.repeat(np.arange(n), T)
    data = MicData(rng.normal(size=(n * T, p, d)), es, n)
    st = _state(n * T, n, p, K, d, rng, alpha=rng.uniform(0.5, 1, n), beta=rng.uniform(0.5, 1, n * T),
                pi=rng.dirichlet(np.ones(K)))
    return data, st, PriorConfig().resolve(data.X)


def test_align_labels_preserves_likelihood_and_never_lowers_joint():
    for seed in range(30):
        data, st, pr = _toy_chain_inputs(seed=seed)
        new = align_labels(st, data)
        a, b = log_density_terms(st, data, pr), log_density_terms(new, data, pr)
        assert abs(a["likelihood"] - b["likelihood"]) < 1e-10
        assert log_joint(new, data, pr) >= log_joint(st, data, pr) - 1e-10
        # aligned state: no further gain
        again = align_labels(new, data)
        np.testing.assert_array_equal(again.C, new.C)
        np.testing.assert_array_equal(again.L, new.L)


def test_align_labels_already_aligned_is_identity():
    data, st, pr = _toy_chain_inputs()
    st.C[:] = st.S
    st.L[:] = st.S
    new = align_labels(st, data)
    np.testing.assert_array_equal(new.L, st.L)
    np.testing.assert_allclose(new.mu, st.mu)


def test_align_labels_undoes_subject_relabeling():
    data, st, pr = _toy_chain_inputs(K=4)
    st.C[:] = st.S
    st.L[:] = st.S
    shift = np.array([1, 2, 3, 0])
    mixed = st.copy()
    mixed.C[1] = shift[st.C[1]]
    ep = data.epoch_subject == 1
    mixed.L[ep] = shift[st.L[ep]]
    new = align_labels(mixed, data)
    np.testing.assert_array_equal(new.C, st.C)
    np.testing.assert_array_equal(new.L, st.L)


# ---------------------------------------------------------------- chains

def test_zero_iterations():
    data, _, pr = _toy_chain_inputs()
    tr = run_chain(data, 3, pr, ChainConfig(n_iterations=0, n_burnin=0))
    assert tr.n_draws == 0 and tr.log_density.shape == (1,)


def test_chain_invariants_and_determinism():
    data, _, pr = _toy_chain_inputs()
    cfg = ChainConfig(n_iterations=60, n_burnin=20, thinning=4, seed=5)
    a, b = run_chain(data, 3, pr, cfg), run_chain(data, 3, pr, cfg)
    assert a.n_draws == (60 - 20) // 4
    for name in ("L", "C", "S", "alpha", "beta", "pi", "mu", "sigma2", "log_density"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert np.all(np.isfinite(a.log_density))
    assert np.all((a.alpha >= 1 / 3) & (a.alpha <= 1)) and np.all((a.beta >= 1 / 3) & (a.beta <= 1))
    np.testing.assert_allclose(a.pi.sum(axis=1), 1.0)
    assert np.all(a.sigma2 > 0)


def test_chain_config_validation():
    with pytest.raises(ValueError):
        ChainConfig(n_iterations=10, n_burnin=10)
    with pytest.raises(ValueError):
        ChainConfig(thinning=0)
    with pytest.raises(ValueError):
        ChainConfig(init="spectral")


def test_random_init_runs():
    data, _, pr = _toy_chain_inputs()
    tr = run_chain(data, 3, pr, ChainConfig(n_iterations=5, n_burnin=1, init="random"))
    assert tr.n_draws == 4


# ---------------------------------------------------------------- getting it right

def _forward(rng, K, n, T, p, d, pr):
    pi = rng.dirichlet(np.full(K, pr.eta))
    S = rng.choice(K, size=p, p=pi)
    lo = 1.0 / K

    def tbeta(a, b, size):
        u = rng.uniform(stats.beta.cdf(lo, a, b), 1.0, size=size)
        return stats.beta.ppf(u, a, b)

    alpha = tbeta(pr.a, pr.b, n)
    C = np.where(rng.random((n, p)) < alpha[:, None], S, (S + rng.integers(1, K, size=(n, p))) % K)
    es = np.repeat(np.arange(n), T)
    beta = tbeta(pr.c, pr.d, n * T)
    L = np.where(rng.random((n * T, p)) < beta[:, None], C[es], (C[es] + rng.integers(1, K, size=(n * T, p))) % K)
    sigma2 = pr.xi02 / rng.gamma(pr.xi01, size=(n * T, K))
    mu = pr.mu0 + np.sqrt(sigma2 / pr.lambda0)[..., None] * rng.standard_normal((n * T, K, d))
    state = MicState(L=L, C=C, S=S, mu=mu, sigma2=sigma2, alpha=alpha, beta=beta, pi=pi)
    return state, _draw_X(rng, state)


def _draw_X(rng, st):
    E = st.L.shape[0]
    m = st.mu[np.arange(E)[:, None], st.L]
    s = np.sqrt(st.sigma2[np.arange(E)[:, None], st.L])[..., None]
    return m + s * rng.standard_normal(m.shape)


def _stats(st):
    return np.array([st.alpha.mean(), st.beta.mean(), st.pi[0], (st.C == st.S).mean(), np.log(st.sigma2).mean()])


def test_getting_it_right():
    K, n, T, p, d = 2, 2, 2, 4, 2
    pr = PriorConfig(eta=2.0, mu0=np.zeros(d), lambda0=1.0, xi01=3.0, xi02=1.0, a=2.0, b=2.0, c=2.0, d=2.0)
    rng = np.random.default_rng(22)
    es = np.repeat(np.arange(n), T)

    fwd = np.array([_stats(_forward(rng, K, n, T, p, d, pr)[0]) for _ in range(20_000)])

    state, X = _forward(rng, K, n, T, p, d, pr)
    chain = []
    for it in range(30_000):
        data = MicData(X, es, n)
        state = sweep(state, data, pr, rng, align=False)
        X = _draw_X(rng, state)
        chain.append(_stats(state))
    chain = np.array(chain[1000:])

    # batch means for the autocorrelated Gibbs sequence
    nb = 50
    batches = chain[: len(chain) // nb * nb].reshape(nb, -1, chain.shape[1]).mean(axis=1)
    se_chain = batches.std(axis=0, ddof=1) / np.sqrt(nb)
    se_fwd = fwd.std(axis=0, ddof=1) / np.sqrt(len(fwd))
    z = (chain.mean(axis=0) - fwd.mean(axis=0)) / np.sqrt(se_chain**2 + se_fwd**2)
    assert np.all(np.abs(z) < 4), z
