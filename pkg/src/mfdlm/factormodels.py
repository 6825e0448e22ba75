"""Dynamic factor submodels and their parameter updates.

Common trend: for outcome c >= 2,
``beta_t^(c) = gamma^(c) s_t^(c) beta_t^(1) + omega_t^(c)`` with AR(1) errors
``omega_t = psi omega_{t-1} + sigma_t z_t`` (outcome 1 has ``omega = beta``).
The hidden-Markov variant lets ``s_t`` switch between 0 and 1; the plain
common-trend model fixes ``s = 1``.  Random walk: ``beta_t = beta_{t-1} + w_t``
within each trial, ``w_t ~ N(0, W_k)`` jointly over outcomes.

Arrays indexed by time, outcome and factor use the layout (T, C, K); the
stacked state used by :mod:`mfdlm.ssm` is outcome-major (index c*K + k).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import _kernels

log = logging.getLogger(__name__)

MODEL_KINDS = ("common-trend", "common-trend-hmm", "random-walk")
GAMMA_PRIOR_VAR = 1e8
PSI_PRIOR_VAR = 1e8
BETA_PRIOR = (1.0, 3.0, 1.0, 3.0)  # a01, b01, a10, b10
WALK_START_VAR = 1e4


@dataclass
class FactorParams:
    gamma: np.ndarray  # (C, K); row 0 unused
    psi: np.ndarray  # (C, K)
    s: np.ndarray  # (T, C, K) in {0, 1}; row c=0 unused
    q01: np.ndarray  # (C, K)
    q10: np.ndarray  # (C, K)
    K_linked: int
    walk_cov: np.ndarray | None = None  # (K, C, C)
    trial_start: np.ndarray | None = None  # (T,) bool

    @classmethod
    def initial(cls, T, C, K, K_linked=None, trial_start=None) -> FactorParams:
        return cls(
            gamma=np.zeros((C, K)),
            psi=np.zeros((C, K)),
            s=np.ones((T, C, K), dtype=np.int64),
            q01=np.full((C, K), 0.25),
            q10=np.full((C, K), 0.25),
            K_linked=K if K_linked is None else int(K_linked),
            walk_cov=np.stack([np.eye(C)] * K),
            trial_start=trial_start,
        )

    def copy(self) -> FactorParams:
        return FactorParams(
            self.gamma.copy(), self.psi.copy(), self.s.copy(), self.q01.copy(), self.q10.copy(), self.K_linked,
            None if self.walk_cov is None else self.walk_cov.copy(),
            None if self.trial_start is None else self.trial_start.copy(),
        )

    def permute(self, perm) -> None:
        """Reorder every per-factor parameter by ``perm`` (a length-K index)."""
        self.gamma = self.gamma[:, perm]
        self.psi = self.psi[:, perm]
        self.s = self.s[:, :, perm]
        self.q01 = self.q01[:, perm]
        self.q10 = self.q10[:, perm]
        if self.walk_cov is not None:
            self.walk_cov = self.walk_cov[perm]

    def reset_unlinked(self) -> None:
        self.gamma[:, self.K_linked :] = 0.0
        self.s[:, :, self.K_linked :] = 1


# ---------------------------------------------------------------------------
# state-space assembly

def link_matrices(params: FactorParams, T: int) -> np.ndarray:
    """Q_t for every t: Q[t, c*K+k, k] = gamma_k^(c) s_{k,t}^(c) for c >= 2."""
    C, K = params.gamma.shape
    p = C * K
    Q = np.zeros((T, p, p))
    k_idx = np.arange(K)
    for c in range(1, C):
        Q[:, c * K + k_idx, k_idx] = params.gamma[c][None, :] * params.s[:, c, :]
    return Q


def assemble_state_space(kind: str, params: FactorParams, innov_var: np.ndarray):
    """Evolution matrices (G_t, W_t), each of shape (T, p, p).

    ``innov_var`` is the (T, C, K) array of sigma^2_{k,(c),t}.  For the
    common-trend models the first time step carries the stationary AR(1)
    distribution (G_1 = 0); for the random walk every trial start restarts
    from N(0, 1e4 I).
    """
    T, C, K = innov_var.shape
    p = C * K
    if kind == "random-walk":
        W_blocks = params.walk_cov
        Wfull = np.zeros((p, p))
        for k in range(K):
            idx = np.arange(C) * K + k
            Wfull[np.ix_(idx, idx)] = W_blocks[k]
        G = np.broadcast_to(np.eye(p), (T, p, p)).copy()
        W = np.broadcast_to(Wfull, (T, p, p)).copy()
        starts = np.zeros(T, bool) if params.trial_start is None else params.trial_start.copy()
        starts[0] = True
        G[starts] = 0.0
        W[starts] = WALK_START_VAR * np.eye(p)
        return G, W
    if kind not in ("common-trend", "common-trend-hmm"):
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    psi = params.psi.reshape(p)
    Q = link_matrices(params, T)
    IQ = Q + np.eye(p)
    # (I + Q_t) Psi (I - Q_{t-1}) = Psi + Q_t Psi - Psi Q_{t-1}, since Q_t Psi Q_{t-1} = 0
    G = np.empty((T, p, p))
    G[0] = 0.0
    G[1:] = np.diag(psi)[None] + Q[1:] * psi[None, None, :] - psi[None, :, None] * Q[:-1]
    var = innov_var.reshape(T, p).copy()
    var[0] = var[0] / (1.0 - psi**2)
    W = np.einsum("tij,tj,tlj->til", IQ, var, IQ)
    return G, 0.5 * (W + W.transpose(0, 2, 1))


# ---------------------------------------------------------------------------
# residual series

def ar_errors(beta: np.ndarray, params: FactorParams) -> np.ndarray:
    """omega_t^(c) = beta_t^(c) - gamma s_t beta_t^(1); omega^(1) = beta^(1)."""
    omega = beta.copy()
    omega[:, 1:, :] -= params.gamma[None, 1:, :] * params.s[:, 1:, :] * beta[:, :1, :]
    return omega


def standardized_innovations(omega: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """w_1 = sqrt(1 - psi^2) omega_1, w_t = omega_t - psi omega_{t-1}; so w_t = sigma_t z_t."""
    w = np.empty_like(omega)
    w[0] = np.sqrt(1.0 - psi**2) * omega[0]
    w[1:] = omega[1:] - psi * omega[:-1]
    return w


def walk_increments(beta: np.ndarray, trial_start, k: int) -> np.ndarray:
    """Within-trial differences beta_t - beta_{t-1} for factor k; shape (N, C)."""
    T = beta.shape[0]
    starts = np.zeros(T, bool) if trial_start is None else np.asarray(trial_start, bool)
    keep = ~starts[1:]
    return (beta[1:, :, k] - beta[:-1, :, k])[keep]


# ---------------------------------------------------------------------------
# gamma

def gamma_regression(y_c, x_ref, s, psi, var):
    """Quasi-differenced response and regressor for gamma, with t = 1 scaled by sqrt(1 - psi^2)."""
    r = math.sqrt(1.0 - psi * psi)
    sx = s * x_ref
    yy = np.r_[r * y_c[0], y_c[1:] - psi * y_c[:-1]]
    xx = np.r_[r * sx[0], sx[1:] - psi * sx[:-1]]
    return yy, xx, np.asarray(var, dtype=float)


def gamma_posterior(y_c, x_ref, s, psi, var, prior_var=GAMMA_PRIOR_VAR):
    yy, xx, v = gamma_regression(y_c, x_ref, s, psi, var)
    prec = 1.0 / prior_var + float(np.sum(xx * xx / v))
    mean = float(np.sum(xx * yy / v)) / prec
    return mean, prec


def sample_gamma(y_c, x_ref, s, psi, var, rng, prior_var=GAMMA_PRIOR_VAR) -> float:
    """Conjugate Gaussian draw of gamma_k^(c) given the factor paths."""
    mean, prec = gamma_posterior(y_c, x_ref, s, psi, var, prior_var)
    if prec <= 1.0 / prior_var:
        log.debug("gamma regressor is identically zero; drawing from the prior")
    return mean + rng.standard_normal() / math.sqrt(prec)


# ---------------------------------------------------------------------------
# AR coefficient

def ar_posterior(omega, var, prior_var=PSI_PRIOR_VAR):
    """Gaussian conditional of psi from the t >= 2 terms (before truncation)."""
    v = np.asarray(var, dtype=float)[1:]
    lag, lead = omega[:-1], omega[1:]
    prec = 1.0 / prior_var + float(np.sum(lag * lag / v))
    mean = float(np.sum(lag * lead / v)) / prec
    return mean, prec


def _truncnorm_ppf(u, mean, sd, lo=-1.0, hi=1.0):
    a, b = (lo - mean) / sd, (hi - mean) / sd
    x = float(stats.truncnorm.ppf(u, a, b, loc=mean, scale=sd))
    return float(np.clip(x, np.nextafter(lo, hi), np.nextafter(hi, lo)))


def _stationary_logfactor(psi, omega1, var1):
    return 0.5 * math.log1p(-psi * psi) - (1.0 - psi * psi) * omega1 * omega1 / (2.0 * var1)


def sample_ar_coeff(omega, var, rng, current: float | None = None, prior_var=PSI_PRIOR_VAR) -> float:
    """Truncated-normal draw of psi on (-1, 1).

    The proposal is the conjugate conditional from t >= 2.  When ``current``
    is given, the stationary density of omega_1 enters through an
    independence Metropolis-Hastings step, which makes the update exact.
    """
    mean, prec = ar_posterior(omega, var, prior_var)
    prop = _truncnorm_ppf(rng.uniform(), mean, 1.0 / math.sqrt(prec))
    if current is None:
        return prop
    var1 = float(np.asarray(var)[0])
    log_a = _stationary_logfactor(prop, omega[0], var1) - _stationary_logfactor(current, omega[0], var1)
    return prop if math.log(rng.uniform()) < log_a else float(current)


# ---------------------------------------------------------------------------
# hidden Markov states

def stationary_prob(q01: float, q10: float) -> float:
    tot = q01 + q10
    return 0.5 if tot <= 0.0 else q01 / tot


def _log(x):
    return math.log(x) if x > 0.0 else -math.inf


def hmm_potentials(y_c, x_ref, gamma, psi, var, q01, q10, p_init=None):
    """Log potentials for the state path of one (k, c) series.

    Returns ``(log_init, log_pair)`` with ``log_pair[t, a, b]`` the log of
    P(s_t = b | s_{t-1} = a) times the Gaussian density of the AR residual.
    """
    T = y_c.size
    var = np.asarray(var, dtype=float)
    pi1 = stationary_prob(q01, q10) if p_init is None else float(p_init)
    r = math.sqrt(1.0 - psi * psi)
    log_init = np.empty(2)
    for b in range(2):
        e = r * (y_c[0] - gamma * b * x_ref[0])
        log_init[b] = _log(pi1 if b else 1.0 - pi1) - 0.5 * e * e / var[0]
    trans = np.array([[_log(1.0 - q01), _log(q01)], [_log(q10), _log(1.0 - q10)]])
    log_pair = np.zeros((T, 2, 2))
    if T > 1:
        base = y_c[1:] - psi * y_c[:-1]
        for a in range(2):
            for b in range(2):
                e = base - gamma * (b * x_ref[1:] - psi * a * x_ref[:-1])
                log_pair[1:, a, b] = trans[a, b] - 0.5 * e * e / var[1:]
    return log_init, log_pair


def sample_hmm_states(y_c, x_ref, gamma, psi, var, q01, q10, rng, p_init=None, use_numba=None):
    """Joint draw of s_{1:T} by forward filtering, backward sampling over two states."""
    log_init, log_pair = hmm_potentials(y_c, x_ref, gamma, psi, var, q01, q10, p_init)
    path, _ = _kernels.hmm_pair_ffbs(log_init, log_pair, rng.uniform(size=y_c.size), use_numba)
    return path


def transition_counts(path) -> dict[str, int]:
    path = np.asarray(path)
    a, b = path[:-1], path[1:]
    return {
        "n00": int(np.sum((a == 0) & (b == 0))),
        "n01": int(np.sum((a == 0) & (b == 1))),
        "n10": int(np.sum((a == 1) & (b == 0))),
        "n11": int(np.sum((a == 1) & (b == 1))),
    }


def transition_posterior(path, prior=BETA_PRIOR):
    n = transition_counts(path)
    a01, b01, a10, b10 = prior
    return (a01 + n["n01"], b01 + n["n00"]), (a10 + n["n10"], b10 + n["n11"])


def sample_transition_probs(path, rng, prior=BETA_PRIOR, current=None):
    """Beta draws of (q01, q10) from the transition counts.

    With ``current = (q01, q10)`` the stationary probability of s_1 is
    accounted for by a Metropolis-Hastings correction.
    """
    (a0, b0), (a1, b1) = transition_posterior(path, prior)
    eps = 1e-12
    prop = (float(np.clip(rng.beta(a0, b0), eps, 1 - eps)), float(np.clip(rng.beta(a1, b1), eps, 1 - eps)))
    if current is None:
        return prop
    s1 = int(np.asarray(path)[0])

    def logpi(q):
        p1 = stationary_prob(*q)
        return _log(p1 if s1 else 1.0 - p1)

    log_a = logpi(prop) - logpi(current)
    return prop if math.log(rng.uniform()) < log_a else tuple(float(v) for v in current)
