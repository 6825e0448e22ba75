"""Factor loading curves: smoothing parameters and constrained coefficient draws.

Loadings live in a ``(G, K, n)`` array ``D``: ``G = 1`` when the curves are
shared by every outcome ("common" mode) and ``G = C`` when each outcome has
its own set ("per-outcome" mode).  The smoothing parameters ``lam`` have shape
``(G, K)`` and, once the ordering phase is over, decrease in k.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special as sc

from . import cgls
from .errors import NumericalError

log = logging.getLogger(__name__)

PRIOR_VAR_UNPENALIZED = 1e8
LAMBDA_FLOOR = 1e-8  # lambda_K > (1e4)^-2
UNORDERED_ITERATIONS = 10
MODES = ("common", "per-outcome")


@dataclass
class FlcState:
    mode: str
    D: np.ndarray
    lam: np.ndarray
    ref: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown FLC mode {self.mode!r}; expected one of {MODES}")
        self.D = np.asarray(self.D, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        if self.ref is None:
            self.ref = self.D.copy()

    @property
    def G(self) -> int:
        return self.D.shape[0]

    @property
    def K(self) -> int:
        return self.D.shape[1]

    def loadings_for(self, c: int) -> np.ndarray:
        return self.D[0 if self.mode == "common" else c]

    def copy(self) -> FlcState:
        return FlcState(self.mode, self.D.copy(), self.lam.copy(), self.ref.copy())


class SufficientStats:
    """Per-observation-group quantities reused by every Gibbs block.

    Groups are the observed (c, t) pairs.  Each group points to one distinct
    observation-point set; ``gram_sets[p] = Phi_p' Phi_p`` is computed once per
    set, however many groups share it.
    """

    def __init__(self, data, basis):
        self.C, self.T, self.n = data.C, data.T, basis.n
        oc, ot, starts = data.pairs()
        self.group_c = oc.astype(np.int64)
        self.group_t = (ot - 1).astype(np.int64)
        self.n_groups = oc.size
        set_index: dict[bytes, int] = {}
        phi_sets, group_set = [], np.empty(self.n_groups, dtype=np.int64)
        for g in range(self.n_groups):
            tau = data.tau[starts[g] : starts[g + 1]]
            key = tau.tobytes()
            if key not in set_index:
                set_index[key] = len(phi_sets)
                phi_sets.append(basis.evaluate(tau))
            group_set[g] = set_index[key]
        self.group_set = group_set
        self.phi_sets = phi_sets
        self.gram_sets = np.stack([P.T @ P for P in phi_sets])
        self.set_offsets = np.r_[0, np.cumsum([P.shape[0] for P in phi_sets])]
        self.phi_stacked = np.vstack(phi_sets)

        self.row_group = np.repeat(np.arange(self.n_groups), np.diff(starts))
        pos = np.arange(data.y.size) - starts[self.row_group]
        self.row_phi = self.set_offsets[group_set[self.row_group]] + pos
        self.y = np.asarray(data.y)
        self.row_c = data.outcome
        self.phy = np.zeros((self.n_groups, self.n))
        for g in range(self.n_groups):
            lo, hi = starts[g], starts[g + 1]
            self.phy[g] = phi_sets[group_set[g]].T @ data.y[lo:hi]
        self.n_per_outcome = np.bincount(data.outcome, minlength=self.C).astype(np.int64)
        self.group_m = np.diff(starts)

    def group_beta(self, beta: np.ndarray) -> np.ndarray:
        """beta (T, C, K) -> (n_groups, K) values at each observed (c, t)."""
        return beta[self.group_t, self.group_c]

    def fitted(self, beta: np.ndarray, flc: FlcState) -> np.ndarray:
        out = np.empty(self.y.size)
        bg = self.group_beta(beta)
        for g_idx in range(flc.G):
            curves = self.phi_stacked @ flc.D[g_idx].T  # (sum m_p, K)
            rows = slice(None) if flc.mode == "common" else self.row_c == g_idx
            r = np.arange(self.y.size)[rows]
            out[r] = np.einsum("rk,rk->r", curves[self.row_phi[r]], bg[self.row_group[r]])
        return out

    def ssr(self, beta: np.ndarray, flc: FlcState) -> np.ndarray:
        resid = self.y - self.fitted(beta, flc)
        return np.bincount(self.row_c, weights=resid * resid, minlength=self.C)


def deviance(stats_: SufficientStats, beta, flc: FlcState, sigma2) -> float:
    """-2 log-likelihood of the observation equation."""
    ssr = stats_.ssr(beta, flc)
    n = stats_.n_per_outcome
    return float(np.sum(n * np.log(2.0 * math.pi * sigma2) + ssr / sigma2))


def prior_precision(lam: float, n: int) -> np.ndarray:
    return np.r_[1.0 / PRIOR_VAR_UNPENALIZED, 1.0 / PRIOR_VAR_UNPENALIZED, np.full(n - 2, lam)]


def sample_lambda(d, M: int, lower: float, upper: float, rng) -> float:
    """Draw lambda ~ Gamma((M+1)/2, rate = sum_{j>=3} d_j^2 / 2) truncated to (lower, upper)."""
    d = np.asarray(d, dtype=float)
    ss = float(d[2:] @ d[2:])
    if ss <= 1e-12:
        raise NumericalError("penalized coefficients are numerically zero; the smoothing-parameter rate is degenerate")
    if not 0.0 <= lower < upper:
        raise ValueError(f"invalid truncation interval ({lower}, {upper})")
    shape, rate = 0.5 * (M + 1), 0.5 * ss
    x_lo, x_hi = lower * rate, upper * rate
    u = rng.uniform()
    if sc.gammainc(shape, x_lo) > 0.5:
        # upper tail: work with survival functions to keep precision
        s_lo, s_hi = sc.gammaincc(shape, x_lo), sc.gammaincc(shape, x_hi)
        if s_lo - s_hi < 1e-14:
            return _fallback(lower, upper, shape, rate)
        val = sc.gammainccinv(shape, s_hi + u * (s_lo - s_hi)) / rate
    else:
        f_lo, f_hi = sc.gammainc(shape, x_lo), sc.gammainc(shape, x_hi)
        if f_hi - f_lo < 1e-14:
            return _fallback(lower, upper, shape, rate)
        val = sc.gammaincinv(shape, f_lo + u * (f_hi - f_lo)) / rate
    return float(np.clip(val, np.nextafter(lower, np.inf), np.nextafter(upper, 0.0)))


def _fallback(lower, upper, shape, rate):
    mid = 0.5 * (lower + upper) if math.isfinite(upper) else lower + shape / rate
    log.warning("truncated Gamma window (%g, %g) has negligible mass; using %g", lower, upper, mid)
    return float(mid)


def conditional_terms(k: int, g_idx: int, flc: FlcState, stats_: SufficientStats, beta, sigma2):
    """Precision B_k^{-1} and linear term b_k of the full conditional of d_k."""
    D = flc.D[g_idx]
    n = D.shape[1]
    bg = stats_.group_beta(beta)
    sel = np.ones(stats_.n_groups, bool) if flc.mode == "common" else stats_.group_c == g_idx
    sets = stats_.group_set[sel]
    bsel = bg[sel]
    inv_s2 = 1.0 / np.asarray(sigma2)[stats_.group_c[sel]]
    n_sets = stats_.gram_sets.shape[0]

    w = np.bincount(sets, weights=bsel[:, k] ** 2 * inv_s2, minlength=n_sets)
    prec = np.einsum("p,pij->ij", w, stats_.gram_sets)
    prec[np.diag_indices(n)] += prior_precision(flc.lam[g_idx, k], n)

    lin = (bsel[:, k] * inv_s2) @ stats_.phy[sel]
    others = [j for j in range(flc.K) if j != k]
    if others:
        cross = bsel[:, k : k + 1] * bsel[:, others] * inv_s2[:, None]
        X = np.stack([np.bincount(sets, weights=cross[:, i], minlength=n_sets) for i in range(len(others))], axis=1)
        lin -= np.einsum("pij,pj->i", stats_.gram_sets, X @ D[others])
    return prec, lin


def sample_flc(k: int, g_idx: int, flc: FlcState, stats_: SufficientStats, beta, sigma2, J, rng) -> float:
    """Draw d_k in place, normalize it, and rescale beta_k to match.

    Returns the scale s = sqrt(d*' J d*) applied to beta.
    """
    prec, lin = conditional_terms(k, g_idx, flc, stats_, beta, sigma2)
    D = flc.D[g_idx]
    others = [j for j in range(flc.K) if j != k]
    L = (J @ D[others].T) if others else None
    d_star = cgls.sample_constrained(cgls.GaussianFactor(prec, lin, L), rng)
    scale2 = float(d_star @ J @ d_star)
    if not scale2 > 1e-20:
        raise NumericalError(f"factor {k + 1} loading curve collapsed to zero norm; the factor carries no signal")
    scale = math.sqrt(scale2)
    d_new = d_star / scale
    if d_new @ J @ flc.ref[g_idx, k] < 0.0:
        d_new, scale = -d_new, -scale
    D[k] = d_new
    cols = slice(None) if flc.mode == "common" else g_idx
    beta[:, cols, k] *= scale
    return scale


def lambda_bounds(k: int, lam_row: np.ndarray, ordered: bool):
    if not ordered:
        return LAMBDA_FLOOR, math.inf
    upper = math.inf if k == 0 else float(lam_row[k - 1])
    lower = LAMBDA_FLOOR if k == lam_row.size - 1 else float(lam_row[k + 1])
    return lower, upper


def sweep(flc: FlcState, stats_: SufficientStats, beta, sigma2, basis, rng, iteration: int):
    """One pass over k in random order for each loading group.

    ``iteration`` is 1-based.  Before and during ``UNORDERED_ITERATIONS`` the
    smoothing parameters are unconstrained; at the end of that iteration every
    group is sorted by decreasing lambda.  Returns the applied permutation as a
    ``(G, K)`` integer array, or ``None`` when nothing was reordered.
    """
    J = basis.gram
    ordered = iteration > UNORDERED_ITERATIONS
    for g_idx in range(flc.G):
        for k in rng.permutation(flc.K):
            lo, hi = lambda_bounds(k, flc.lam[g_idx], ordered)
            flc.lam[g_idx, k] = sample_lambda(flc.D[g_idx, k], basis.M, lo, hi, rng)
            sample_flc(k, g_idx, flc, stats_, beta, sigma2, J, rng)
    if iteration != UNORDERED_ITERATIONS:
        return None
    perm = np.argsort(-flc.lam, axis=1, kind="stable")
    for g_idx in range(flc.G):
        p = perm[g_idx]
        flc.lam[g_idx] = flc.lam[g_idx, p]
        flc.D[g_idx] = flc.D[g_idx, p]
        flc.ref[g_idx] = flc.ref[g_idx, p]
    return perm


def orthonormality_error(flc: FlcState, J) -> float:
    K = flc.K
    return max(float(np.max(np.abs(D @ J @ D.T - np.eye(K)))) for D in flc.D)
