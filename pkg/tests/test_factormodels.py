import itertools
import math

import numpy as np
import pytest
from scipy import stats

from mfdlm import factormodels as fm


def random_params(rng, T=6, C=3, K=2, hmm=True):
    p = fm.FactorParams.initial(T, C, K)
    p.gamma = rng.normal(0, 1, (C, K))
    p.psi = rng.uniform(-0.9, 0.9, (C, K))
    if hmm:
        p.s = rng.integers(0, 2, (T, C, K))
    return p


def dense_G_W(params, innov, t):
    T, C, K = innov.shape
    p = C * K
    Q = np.zeros((T, p, p))
    for c in range(1, C):
        for k in range(K):
            Q[:, c * K + k, k] = params.gamma[c, k] * params.s[:, c, k]
    Psi = np.diag(params.psi.reshape(p))
    I = np.eye(p)
    G = (I + Q[t]) @ Psi @ (I - Q[t - 1])
    W = (I + Q[t]) @ np.diag(innov[t].reshape(p)) @ (I + Q[t]).T
    return G, W, Q


def test_decoupled_when_all_states_zero(rng):
    p = random_params(rng)
    p.s[:] = 0
    innov = rng.uniform(0.5, 2, (6, 3, 2))
    G, W = fm.assemble_state_space("common-trend-hmm", p, innov)
    for t in range(1, 6):
        np.testing.assert_array_equal(G[t], np.diag(p.psi.ravel()))
        np.testing.assert_allclose(W[t], np.diag(innov[t].ravel()))


def test_assembly_matches_dense_products(rng):
    for _ in range(100):
        p = random_params(rng)
        innov = rng.uniform(0.1, 3, (6, 3, 2))
        G, W = fm.assemble_state_space("common-trend-hmm", p, innov)
        for t in range(1, 6):
            Gd, Wd, Q = dense_G_W(p, innov, t)
            assert np.max(np.abs(G[t] - Gd)) < 1e-12
            assert np.max(np.abs(W[t] - Wd)) < 1e-12
            np.testing.assert_allclose((np.eye(6) + Q[t]) @ (np.eye(6) - Q[t]), np.eye(6), atol=1e-12)


def test_first_step_is_stationary(rng):
    p = random_params(rng)
    innov = rng.uniform(0.5, 2, (6, 3, 2))
    G, W = fm.assemble_state_space("common-trend", p, innov)
    assert np.all(G[0] == 0)
    _, _, Q = dense_G_W(p, innov, 1)
    stat = np.diag((innov[0] / (1 - p.psi**2)).ravel())
    I = np.eye(6)
    Q1 = fm.link_matrices(p, 6)[0]
    np.testing.assert_allclose(W[0], (I + Q1) @ stat @ (I + Q1).T, atol=1e-12)


def test_all_ones_covariance_blocks(rng):
    p = random_params(rng)
    p.s[:] = 1
    innov = rng.uniform(0.5, 2, (6, 3, 2))
    _, W = fm.assemble_state_space("common-trend-hmm", p, innov)
    K = 2
    for t in range(1, 6):
        for c, c2 in [(1, 2), (2, 1)]:
            for k in range(K):
                want = p.gamma[c, k] * p.gamma[c2, k] * innov[t, 0, k]
                assert W[t, c * K + k, c2 * K + k] == pytest.approx(want, rel=1e-12)


def test_hmm_with_all_ones_equals_common_trend(rng):
    p = random_params(rng)
    p.s[:] = 1
    innov = rng.uniform(0.5, 2, (6, 3, 2))
    a = fm.assemble_state_space("common-trend", p, innov)
    b = fm.assemble_state_space("common-trend-hmm", p, innov)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_random_walk_assembly(rng):
    T, C, K = 6, 2, 2
    p = fm.FactorParams.initial(T, C, K, trial_start=np.array([1, 0, 0, 1, 0, 0], bool))
    p.walk_cov = np.stack([np.array([[1.0, 0.3], [0.3, 2.0]]), np.eye(2) * 0.5])
    G, W = fm.assemble_state_space("random-walk", p, np.ones((T, C, K)))
    for t in (0, 3):
        assert np.all(G[t] == 0) and np.allclose(W[t], fm.WALK_START_VAR * np.eye(4))
    np.testing.assert_array_equal(G[1], np.eye(4))
    assert W[1][0, 2] == 0.3 and W[1][1, 3] == 0.0


def test_unknown_kind(rng):
    with pytest.raises(ValueError):
        fm.assemble_state_space("var", random_params(rng), np.ones((6, 3, 2)))


def test_gamma_prior_when_no_information(rng):
    draws = [fm.sample_gamma(rng.standard_normal(50), np.zeros(50), np.ones(50), 0.3, np.ones(50), rng)
             for _ in range(2000)]
    assert np.std(draws) == pytest.approx(1e4, rel=0.1)


def test_gamma_posterior_closed_form(rng):
    T = 40
    y, x, s = rng.standard_normal(T), rng.standard_normal(T), rng.integers(0, 2, T)
    psi, var = 0.4, rng.uniform(0.5, 2, T)
    mean, prec = fm.gamma_posterior(y, x, s, psi, var)
    # weighted least squares on the quasi-differenced series
    r = math.sqrt(1 - psi**2)
    X = np.r_[r * s[0] * x[0], s[1:] * x[1:] - psi * s[:-1] * x[:-1]]
    Y = np.r_[r * y[0], y[1:] - psi * y[:-1]]
    assert prec == pytest.approx(1e-8 + np.sum(X**2 / var), rel=1e-12)
    assert mean == pytest.approx(np.sum(X * Y / var) / prec, rel=1e-10)


def test_gamma_calibration(rng):
    T = 5000
    x = rng.standard_normal(T)
    omega = np.zeros(T)
    for t in range(T):
        omega[t] = 0.3 * (omega[t - 1] if t else 0) + rng.standard_normal()
    y = 0.62 * x + omega
    mean, prec = fm.gamma_posterior(y, x, np.ones(T), 0.3, np.ones(T))
    assert abs(mean - 0.62) < 3 / math.sqrt(prec)


def ar_series(rng, psi, T):
    w = np.zeros(T)
    w[0] = rng.standard_normal() / math.sqrt(1 - psi**2)
    for t in range(1, T):
        w[t] = psi * w[t - 1] + rng.standard_normal()
    return w


@pytest.mark.parametrize("psi_true", [0.0, 0.8])
def test_ar_coefficient_calibration(rng, psi_true):
    omega = ar_series(rng, psi_true, 5000)
    draws, cur = [], 0.0
    for _ in range(2000):
        cur = fm.sample_ar_coeff(omega, np.ones(5000), rng, current=cur)
        draws.append(cur)
    draws = np.array(draws)
    assert np.all(np.abs(draws) < 1)
    if psi_true == 0.0:
        assert abs(draws.mean()) < 0.05
    else:
        assert abs(draws.mean() - psi_true) < 3 * draws.std()


def test_ar_posterior_closed_form(rng):
    om, v = rng.standard_normal(30), rng.uniform(0.5, 2, 30)
    mean, prec = fm.ar_posterior(om, v)
    assert prec == pytest.approx(1e-8 + np.sum(om[:-1] ** 2 / v[1:]), rel=1e-12)
    assert mean == pytest.approx(np.sum(om[:-1] * om[1:] / v[1:]) / prec, rel=1e-10)


def test_ar_exact_with_stationary_term(rng):
    # short series: the Metropolis correction matters; compare with grid posterior
    omega = ar_series(rng, 0.6, 8)
    var = np.ones(8)
    grid = np.linspace(-0.999, 0.999, 4001)
    logp = np.array([
        0.5 * math.log1p(-g * g) - 0.5 * (1 - g * g) * omega[0] ** 2 - 0.5 * np.sum((omega[1:] - g * omega[:-1]) ** 2)
        for g in grid
    ])
    w = np.exp(logp - logp.max())
    w /= w.sum()
    post_mean = w @ grid
    cur, draws = 0.0, []
    for _ in range(20_000):
        cur = fm.sample_ar_coeff(omega, var, rng, current=cur)
        draws.append(cur)
    draws = np.array(draws)
    sd = math.sqrt(w @ (grid - post_mean) ** 2)
    assert abs(draws.mean() - post_mean) < 5 * sd / math.sqrt(draws.size / 5)


def enumerate_hmm(y, x, gamma, psi, var, q01, q10, p1):
    """Posterior marginals of s by scoring every path under the model directly."""
    T = y.size
    paths = np.array(list(itertools.product((0, 1), repeat=T)))
    P = np.array([[1 - q01, q01], [q10, 1 - q10]])
    logp = np.empty(len(paths))
    for i, s in enumerate(paths):
        omega = y - gamma * s * x
        lp = math.log(p1 if s[0] else 1 - p1)
        lp += stats.norm.logpdf(omega[0], 0, math.sqrt(var[0] / (1 - psi**2)))
        for t in range(1, T):
            lp += math.log(P[s[t - 1], s[t]])
            lp += stats.norm.logpdf(omega[t], psi * omega[t - 1], math.sqrt(var[t]))
        logp[i] = lp
    w = np.exp(logp - logp.max())
    return (w / w.sum()) @ paths


def test_hmm_marginals_vs_enumeration(rng):
    T = 8
    x = rng.normal(0, 1.5, T)
    s_true = np.array([1, 1, 0, 0, 1, 1, 1, 0])
    y = 0.9 * s_true * x + 0.5 * rng.standard_normal(T)
    var = np.full(T, 0.25)
    want = enumerate_hmm(y, x, 0.9, 0.3, var, 0.2, 0.3, fm.stationary_prob(0.2, 0.3))
    draws = np.array([fm.sample_hmm_states(y, x, 0.9, 0.3, var, 0.2, 0.3, rng) for _ in range(100_000)])
    assert np.max(np.abs(draws.mean(0) - want)) < 0.01


def test_hmm_absorbing_ones(rng):
    T = 20
    path = fm.sample_hmm_states(rng.standard_normal(T), rng.standard_normal(T), 0.5, 0.2, np.ones(T), 0.0, 0.0,
                                rng, p_init=1.0)
    assert np.all(path == 1)


def test_hmm_uninformative_emissions(rng):
    T = 6
    q01, q10 = 0.2, 0.4
    draws = np.array([fm.sample_hmm_states(np.zeros(T), np.zeros(T), 1.0, 0.0, np.ones(T), q01, q10, rng)
                      for _ in range(50_000)])
    assert np.max(np.abs(draws.mean(0) - fm.stationary_prob(q01, q10))) < 0.01


def test_transition_counts():
    assert fm.transition_counts(np.zeros(100, int)) == {"n00": 99, "n01": 0, "n10": 0, "n11": 0}
    alt = np.arange(11) % 2
    n = fm.transition_counts(alt)
    assert n["n01"] == n["n10"] == 5
    (a0, b0), _ = fm.transition_posterior(np.zeros(100, int))
    assert (a0, b0) == (1.0, 3.0 + 99)


def test_transition_beta_mean(rng):
    # ten blocks 000001: n00 = 40, n01 = 10
    path = np.array([0, 0, 0, 0, 0, 1] * 10)
    n = fm.transition_counts(path)
    assert (n["n01"], n["n00"]) == (10, 40)
    q = np.array([fm.sample_transition_probs(path, rng)[0] for _ in range(100_000)])
    assert q.mean() == pytest.approx(11 / 54, abs=4 * math.sqrt(11 * 43 / (54**2 * 55)) / math.sqrt(1e5))


def test_permute_and_unlinked():
    p = fm.FactorParams.initial(4, 2, 3, K_linked=2)
    p.gamma[:] = [[0, 0, 0], [1, 2, 3]]
    p.permute([2, 0, 1])
    np.testing.assert_array_equal(p.gamma[1], [3, 1, 2])
    p.reset_unlinked()
    assert p.gamma[1, 2] == 0.0


def test_walk_increments_skip_trial_starts():
    beta = np.arange(12, dtype=float).reshape(6, 2, 1) ** 2
    starts = np.array([1, 0, 0, 1, 0, 0], bool)
    inc = fm.walk_increments(beta, starts, 0)
    assert inc.shape == (4, 2)
