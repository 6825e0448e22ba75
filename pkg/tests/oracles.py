"""Independent reference computations shared by the unit and acceptance tests."""
import itertools

import numpy as np


def stacked_gaussian(G, W, row_ptr, Z, y, v, m0, P0):
    """Joint law of (x_1..x_T, y) built by brute force, then conditioned.

    Returns posterior mean (T, p), posterior covariance (Tp, Tp) and the
    log density of y.
    """
    T, p, _ = G.shape
    means, covs = [], {}
    m, P = m0, P0
    # marginal means and cross covariances Cov(x_s, x_t) for s <= t
    trans = [None] * T
    for t in range(T):
        m = G[t] @ m
        P = G[t] @ P @ G[t].T + W[t]
        means.append(m)
        covs[(t, t)] = P
        trans[t] = G[t]
    for s in range(T):
        acc = covs[(s, s)]
        for t in range(s + 1, T):
            acc = trans[t] @ acc
            covs[(t, s)] = acc
            covs[(s, t)] = acc.T
    big = np.block([[covs[(s, t)] for t in range(T)] for s in range(T)])
    mu = np.concatenate(means)
    H = np.zeros((row_ptr[-1], T * p))
    for t in range(T):
        H[row_ptr[t] : row_ptr[t + 1], t * p : (t + 1) * p] = Z[row_ptr[t] : row_ptr[t + 1]]
    S = H @ big @ H.T + np.diag(v)
    K = big @ H.T @ np.linalg.inv(S)
    r = y - H @ mu
    post_mean = mu + K @ r
    post_cov = big - K @ H @ big
    sign, logdet = np.linalg.slogdet(2 * np.pi * S)
    logdens = -0.5 * (logdet + r @ np.linalg.solve(S, r))
    return post_mean.reshape(T, p), post_cov, logdens


def hmm_marginals(log_init, log_pair):
    """P(s_t = 1) by summing over all 2^T paths."""
    T = log_pair.shape[0]
    logp = []
    paths = np.array(list(itertools.product((0, 1), repeat=T)))
    for path in paths:
        lp = log_init[path[0]] + sum(log_pair[t, path[t - 1], path[t]] for t in range(1, T))
        logp.append(lp)
    logp = np.array(logp)
    w = np.exp(logp - logp.max())
    w /= w.sum()
    return w @ paths


def ar1_draws(rng, rho, n):
    x = np.empty(n)
    x[0] = rng.standard_normal() / np.sqrt(1 - rho**2)
    e = rng.standard_normal(n)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + e[t]
    return x


def random_state_space(rng, T, p, max_rows=3):
    G = rng.uniform(-0.9, 0.9, (T, p, p)) / np.sqrt(p)
    A = rng.standard_normal((T, p, p))
    W = np.einsum("tij,tkj->tik", A, A) / p + 0.1 * np.eye(p)
    counts = rng.integers(0, max_rows + 1, T)
    counts[rng.integers(T)] = max(1, counts.max())
    row_ptr = np.r_[0, np.cumsum(counts)]
    R = row_ptr[-1]
    Z = rng.standard_normal((R, p))
    y = rng.standard_normal(R)
    v = rng.uniform(0.2, 2.0, R)
    m0 = rng.standard_normal(p)
    B = rng.standard_normal((p, p))
    P0 = B @ B.T + np.eye(p)
    return G, W, row_ptr, Z, y, v, m0, P0
