"""Variance blocks: observation variances, random-walk covariances, stochastic volatility.

Stochastic volatility uses the auxiliary-mixture representation
``log(w_t^2) = h_t + log(z_t^2)`` with ``log(chi2_1)`` replaced by a fixed
10-component Gaussian mixture, so the log-volatility path can be drawn with
the same FFBS kernel used for the factors.  Each sweep ends with an
interweaving step that redraws the level and scale of the path in its
non-centered form, which breaks the strong coupling between ``h`` and
``(xi0, sigma_h2)`` on short or quiet series.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import _kernels
from ._logchi2_mixture import MEANS, VARIANCES, WEIGHTS
from .errors import NumericalError

log = logging.getLogger(__name__)

GAMMA_PRIOR = (0.001, 0.001)
XI0_PRIOR_VAR = 1e4
XI1_BETA = (5.0, 1.5)
SIGMA_H_PRIOR = (0.5, 0.5)  # shape, rate
ZERO_OFFSET = 1e-10

MIX_W = np.asarray(WEIGHTS)
MIX_M = np.asarray(MEANS)
MIX_V = np.asarray(VARIANCES)
MIX_LOGW = np.log(MIX_W)


def mixture_moments() -> tuple[float, float]:
    mean = float(MIX_W @ MIX_M)
    var = float(MIX_W @ MIX_V + MIX_W @ (MIX_M - mean) ** 2)
    return mean, var


# ---------------------------------------------------------------------------
# conjugate updates

def sample_log_precision(n: int, ssr: float, rng, prior=GAMMA_PRIOR) -> float:
    """log of sigma^-2 ~ Gamma(a + n/2, rate = b + ssr/2).

    Shapes below one go through Gamma(a) = Gamma(a + 1) U^(1/a) in logs: the
    vague prior alone puts half its mass below the smallest double.
    """
    shape, rate = obs_variance_posterior(n, ssr, prior)
    if shape >= 1.0:
        return math.log(rng.standard_gamma(shape)) - math.log(rate)
    return math.log(rng.standard_gamma(shape + 1.0)) + math.log(rng.uniform()) / shape - math.log(rate)


def sample_obs_variance(n: int, ssr: float, rng, prior=GAMMA_PRIOR) -> float:
    """sigma^2 with sigma^-2 ~ Gamma(a + n/2, rate = b + ssr/2), capped below overflow."""
    return math.exp(min(-sample_log_precision(n, ssr, rng, prior), 709.0))


def obs_variance_posterior(n: int, ssr: float, prior=GAMMA_PRIOR) -> tuple[float, float]:
    return prior[0] + 0.5 * n, prior[1] + 0.5 * ssr


def sample_walk_covariance(increments, rng, rho: float | None = None) -> np.ndarray:
    """W with W^-1 ~ Wishart(df = rho + N, scale = (rho I + sum w w')^-1).

    ``increments`` is an (N, C) array of within-trial factor differences.
    """
    w = np.atleast_2d(np.asarray(increments, dtype=float))
    C = w.shape[1]
    rho = float(C) if rho is None else float(rho)
    S = rho * np.eye(C) + w.T @ w
    try:
        low = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("random-walk covariance scale matrix is not positive definite") from exc
    inv_low = np.linalg.solve(low, np.eye(C))
    scale = inv_low.T @ inv_low
    prec = stats.wishart.rvs(df=rho + w.shape[0], scale=0.5 * (scale + scale.T), random_state=rng)
    prec = np.atleast_2d(prec)
    low_p = np.linalg.cholesky(prec)
    inv = np.linalg.solve(low_p, np.eye(C))
    W = inv.T @ inv
    return 0.5 * (W + W.T)


def sample_constant_innovation_var(resid, rng, prior=GAMMA_PRIOR) -> float:
    r = np.asarray(resid, dtype=float)
    return sample_obs_variance(r.size, float(r @ r), rng, prior)


# ---------------------------------------------------------------------------
# stochastic volatility

@dataclass
class SvState:
    h: np.ndarray
    xi0: float
    xi1: float
    sigma_h2: float
    r: np.ndarray | None = None

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        if not -1.0 < self.xi1 < 1.0:
            raise ValueError("xi1 must lie in (-1, 1)")
        if not self.sigma_h2 > 0:
            raise ValueError("sigma_h2 must be positive")
        if self.r is None:
            self.r = np.zeros(self.h.size, dtype=np.int64)

    def copy(self) -> SvState:
        return SvState(self.h.copy(), self.xi0, self.xi1, self.sigma_h2, self.r.copy())


def log_squares(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    tiny = np.abs(w) < 1e-300
    if np.any(tiny):
        log.info("%d innovations below 1e-300 offset by %g before squaring", int(tiny.sum()), ZERO_OFFSET)
        w = np.where(tiny, ZERO_OFFSET, w)
    return np.log(w * w)


def _ar_ss(ht, xi1):
    """Stationary-start AR(1) sum of squares of the centered path."""
    return (1.0 - xi1 * xi1) * ht[0] ** 2 + float(np.sum((ht[1:] - xi1 * ht[:-1]) ** 2))


def _draw_path(ystar, st: SvState, rng, use_numba=None):
    T = ystar.size
    target = ystar - MIX_M[st.r] - st.xi0
    G = np.full((T, 1, 1), st.xi1)
    G[0] = 0.0
    W = np.full((T, 1, 1), st.sigma_h2)
    W[0] = st.sigma_h2 / (1.0 - st.xi1**2)
    row_ptr = np.arange(T + 1, dtype=np.int64)
    draws, _, status, t_bad = _kernels.ffbs_kernel(
        G, W, row_ptr, np.ones((T, 1)), target, MIX_V[st.r].copy(), np.zeros(1), np.ones((1, 1)),
        rng.standard_normal((T, 1)), use_numba=use_numba,
    )
    if status != _kernels.OK:
        raise NumericalError(f"log-volatility FFBS failed at time {t_bad + 1}")
    return draws[:, 0] + st.xi0


def _draw_xi0(h, st: SvState, rng):
    xi1, s2 = st.xi1, st.sigma_h2
    diff = h[1:] - xi1 * h[:-1]
    prec = 1.0 / XI0_PRIOR_VAR + (1.0 - xi1**2) / s2 + (h.size - 1) * (1.0 - xi1) ** 2 / s2
    lin = (1.0 - xi1**2) * h[0] / s2 + (1.0 - xi1) * float(diff.sum()) / s2
    return lin / prec + rng.standard_normal() / math.sqrt(prec)


def _draw_sigma_h2(ht, xi1, rng):
    # Gamma(1/2, 1/2) prior times Gaussian AR(1) likelihood is GIG(p, a=1, b=S)
    S = max(_ar_ss(ht, xi1), 1e-300)
    p = SIGMA_H_PRIOR[0] - 0.5 * ht.size
    a = 2.0 * SIGMA_H_PRIOR[1]
    y = stats.geninvgauss.rvs(p, math.sqrt(a * S), random_state=rng)
    return float(math.sqrt(S / a) * y)


def _xi1_log_target_extra(xi1, ht0, s2):
    """Log Beta prior plus the stationary t=1 factor; the t>=2 terms cancel with the proposal."""
    x = 0.5 * (xi1 + 1.0)
    a, b = XI1_BETA
    return (a - 1.0) * math.log(x) + (b - 1.0) * math.log1p(-x) + 0.5 * math.log1p(-xi1 * xi1) - (
        1.0 - xi1 * xi1
    ) * ht0 * ht0 / (2.0 * s2)


def _draw_xi1(ht, st: SvState, rng):
    lag, lead = ht[:-1], ht[1:]
    ss = float(lag @ lag)
    if ss <= 0.0:
        return st.xi1
    mean = float(lag @ lead) / ss
    sd = math.sqrt(st.sigma_h2 / ss)
    lo, hi = (-1.0 - mean) / sd, (1.0 - mean) / sd
    u = rng.uniform()
    prop = float(stats.truncnorm.ppf(u, lo, hi, loc=mean, scale=sd))
    prop = float(np.clip(prop, np.nextafter(-1.0, 0.0), np.nextafter(1.0, 0.0)))
    log_ratio = _xi1_log_target_extra(prop, ht[0], st.sigma_h2) - _xi1_log_target_extra(st.xi1, ht[0], st.sigma_h2)
    if math.log(rng.uniform()) < log_ratio:
        return prop
    return st.xi1


def _interweave(ystar, st: SvState, rng) -> None:
    """Redraw (xi0, sigma_h) given the standardized path (h - xi0) / sigma_h.

    Under the Gamma(1/2, rate) prior on sigma_h2, a signed sigma_h is
    N(0, 1 / (2 rate)), so the pair has a Gaussian full conditional in the
    non-centered model ``ystar_t = xi0 + sigma_h * htilde_t + mixture noise``.
    """
    if SIGMA_H_PRIOR[0] != 0.5:  # the Gaussian form needs the half-normal prior
        return
    sd = math.sqrt(st.sigma_h2)
    htilde = (st.h - st.xi0) / sd
    u = ystar - MIX_M[st.r]
    wv = 1.0 / MIX_V[st.r]
    X = np.column_stack([np.ones_like(htilde), htilde])
    prec = (X.T * wv) @ X
    prec[0, 0] += 1.0 / XI0_PRIOR_VAR
    prec[1, 1] += 2.0 * SIGMA_H_PRIOR[1]
    low = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, X.T @ (wv * u))
    xi0, sig = mean + np.linalg.solve(low.T, rng.standard_normal(2))
    if not sig * sig > 0.0:
        return
    st.xi0 = float(xi0)
    st.sigma_h2 = float(sig * sig)
    st.h = st.xi0 + sig * htilde


def sv_update(ystar, st: SvState, rng, use_numba=None) -> SvState:
    """One sweep over (indicators, h, xi0, sigma_h2, xi1) given log squared innovations."""
    ystar = np.asarray(ystar, dtype=float)
    st = st.copy()
    st.r = _kernels.mixture_draw(ystar - st.h, MIX_LOGW, MIX_M, MIX_V, rng.uniform(size=ystar.size), use_numba)
    st.h = _draw_path(ystar, st, rng, use_numba)
    st.xi0 = _draw_xi0(st.h, st, rng)
    ht = st.h - st.xi0
    st.sigma_h2 = _draw_sigma_h2(ht, st.xi1, rng)
    st.xi1 = _draw_xi1(ht, st, rng)
    _interweave(ystar, st, rng)
    return st


def sample_sv_path(omega_tilde, st: SvState, rng, use_numba=None) -> SvState:
    """SV update from standardized-innovation inputs w_t = sigma_t z_t."""
    return sv_update(log_squares(omega_tilde), st, rng, use_numba)


def initial_sv_state(log_var: float, T: int) -> SvState:
    return SvState(np.full(T, float(log_var)), float(log_var), 0.5, 0.1)


def simulate_sv_prior(T: int, rng) -> SvState:
    """Parameters from their priors and a log-volatility path from the model."""
    xi0 = rng.normal(0.0, math.sqrt(XI0_PRIOR_VAR))
    xi1 = 2.0 * rng.beta(*XI1_BETA) - 1.0
    s2 = rng.gamma(SIGMA_H_PRIOR[0], 1.0 / SIGMA_H_PRIOR[1])
    return simulate_sv_path(T, xi0, xi1, s2, rng)


def simulate_sv_path(T, xi0, xi1, s2, rng) -> SvState:
    h = np.empty(T)
    h[0] = xi0 + rng.standard_normal() * math.sqrt(s2 / (1.0 - xi1**2))
    for t in range(1, T):
        h[t] = xi0 + xi1 * (h[t - 1] - xi0) + math.sqrt(s2) * rng.standard_normal()
    return SvState(h, float(xi0), float(xi1), float(s2))


def simulate_mixture_obs(h, rng):
    """Log squared innovations drawn from the mixture approximation itself."""
    r = rng.choice(MIX_W.size, size=h.size, p=MIX_W / MIX_W.sum())
    return h + MIX_M[r] + np.sqrt(MIX_V[r]) * rng.standard_normal(h.size), r
