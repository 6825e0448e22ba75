"""Joint draws of the factor paths by forward filtering, backward sampling.

The state at time t is the stacked factor vector beta_t of length p = C*K in
outcome-major order (index c*K + k).  Observations enter as scalar rows
``y_r = z_r' beta_t + e_r`` with ``e_r ~ N(0, v_r)``; rows for time t are
``row_ptr[t]:row_ptr[t+1]``, so ragged and missing outcome-times need no
special handling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import NumericalError

PRIOR_VAR = 1e4

_MESSAGES = {
    _kernels.BAD_FORECAST_VARIANCE: "forecast variance is not positive",
    _kernels.BAD_FILTER_COVARIANCE: "filter covariance lost positive semidefiniteness",
    _kernels.BAD_SMOOTHER_COVARIANCE: "backward-sampling covariance lost positive semidefiniteness",
}


@dataclass
class StateSpaceSpec:
    G: np.ndarray  # (T, p, p)
    W: np.ndarray  # (T, p, p)
    row_ptr: np.ndarray  # (T + 1,)
    Z: np.ndarray  # (R, p)
    y: np.ndarray  # (R,)
    v: np.ndarray  # (R,)
    m0: np.ndarray | None = None
    P0: np.ndarray | None = None

    def __post_init__(self):
        self.G = np.ascontiguousarray(self.G, dtype=np.float64)
        self.W = np.ascontiguousarray(self.W, dtype=np.float64)
        T, p, _ = self.G.shape
        if self.W.shape != (T, p, p):
            raise ValueError(f"W has shape {self.W.shape}, expected {(T, p, p)}")
        self.row_ptr = np.ascontiguousarray(self.row_ptr, dtype=np.int64)
        if self.row_ptr.shape != (T + 1,) or self.row_ptr[0] != 0 or np.any(np.diff(self.row_ptr) < 0):
            raise ValueError("row_ptr must be a non-decreasing (T + 1,) index starting at 0")
        R = int(self.row_ptr[-1])
        self.Z = np.ascontiguousarray(np.reshape(self.Z, (R, p)), dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64).reshape(R)
        self.v = np.ascontiguousarray(self.v, dtype=np.float64).reshape(R)
        if np.any(self.v <= 0):
            raise ValueError("observation variances must be positive")
        self.m0 = np.zeros(p) if self.m0 is None else np.ascontiguousarray(self.m0, dtype=np.float64)
        self.P0 = PRIOR_VAR * np.eye(p) if self.P0 is None else np.ascontiguousarray(self.P0, dtype=np.float64)

    @property
    def T(self) -> int:
        return self.G.shape[0]

    @property
    def p(self) -> int:
        return self.G.shape[1]


@dataclass
class FfbsResult:
    draws: np.ndarray  # (T, p)
    loglik: float


def ffbs(spec: StateSpaceSpec, rng: np.random.Generator, use_numba: bool | None = None, normals=None) -> FfbsResult:
    """One exact draw of beta_{1:T} given all observation rows.

    Time 1 is propagated from (m0, P0) through G[0] and W[0].  The returned log
    likelihood is that of the supplied rows.
    """
    if normals is None:
        normals = rng.standard_normal((spec.T, spec.p))
    draws, loglik, status, t_bad = _kernels.ffbs_kernel(
        spec.G, spec.W, spec.row_ptr, spec.Z, spec.y, spec.v, spec.m0, spec.P0,
        np.ascontiguousarray(normals), use_numba=use_numba,
    )
    if status != _kernels.OK:
        raise NumericalError(f"FFBS failed at time {t_bad + 1}: {_MESSAGES[status]}")
    return FfbsResult(draws, float(loglik))


def collapse_observations(stats_, flc, sigma2, rel_tol: float = 1e-12):
    """Replace each (c, t) group by at most K pseudo-rows with the same likelihood in beta.

    With F = Phi D' the group contributes ``-|y - F b|^2 / (2 s2)``.  Writing
    ``F'F = V diag(e) V'`` the same quadratic in b is produced by rows
    ``sqrt(e_i) V_i'`` and responses ``V_i' F'y / sqrt(e_i)`` at variance s2,
    dropping directions with negligible e_i.  Returns ``(row_ptr, Z, y, v)``.
    """
    K, C, T = flc.K, stats_.C, stats_.T
    p = C * K
    gD = np.stack([flc.loadings_for(c) for c in range(C)])[stats_.group_c]  # (Ng, K, n)
    A = np.einsum("gkn,gnm,gjm->gkj", gD, stats_.gram_sets[stats_.group_set], gD)
    r = np.einsum("gkn,gn->gk", gD, stats_.phy)
    evals, evecs = np.linalg.eigh(0.5 * (A + A.transpose(0, 2, 1)))
    keep = evals > rel_tol * np.maximum(evals.max(axis=1, keepdims=True), 1e-300)
    safe = np.where(keep, evals, 1.0)
    rows = np.sqrt(safe)[:, :, None] * evecs.transpose(0, 2, 1)  # (Ng, K-eig, K-coef)
    resp = np.einsum("gjk,gk->gj", evecs.transpose(0, 2, 1), r) / np.sqrt(safe)

    order = np.lexsort((stats_.group_c, stats_.group_t))
    counts_per_group = keep.sum(axis=1)
    row_ptr = np.zeros(T + 1, dtype=np.int64)
    np.add.at(row_ptr, stats_.group_t + 1, counts_per_group)
    row_ptr = np.cumsum(row_ptr)
    R = int(row_ptr[-1])
    gi, ji = np.nonzero(keep[order])
    g = order[gi]
    c = stats_.group_c[g]
    Z = np.zeros((R, p))
    Z[np.arange(R)[:, None], c[:, None] * K + np.arange(K)[None, :]] = rows[g, ji]
    y = resp[g, ji]
    v = np.asarray(sigma2, dtype=float)[c]
    return row_ptr, Z, y, v


def dense_posterior(spec: StateSpaceSpec):
    """Mean and covariance of beta_{1:T} | rows by direct Gaussian conditioning.

    Builds the full (T p) x (T p) prior covariance; for testing on small
    instances only.  Also returns the log density of the stacked rows.
    """
    T, p = spec.T, spec.p
    # x_t = G_t x_{t-1} + w_t, written as x = A [x0; w_1..w_T]
    A = np.zeros((T * p, (T + 1) * p))
    for t in range(T):
        blk = slice(t * p, (t + 1) * p)
        prev = A[(t - 1) * p : t * p] if t else np.hstack([np.eye(p), np.zeros((p, T * p))])
        A[blk] = spec.G[t] @ prev
        A[blk, (t + 1) * p : (t + 2) * p] += np.eye(p)
    src_cov = np.zeros(((T + 1) * p, (T + 1) * p))
    src_cov[:p, :p] = spec.P0
    for t in range(T):
        src_cov[(t + 1) * p : (t + 2) * p, (t + 1) * p : (t + 2) * p] = spec.W[t]
    src_mean = np.r_[spec.m0, np.zeros(T * p)]
    mean = A @ src_mean
    cov = A @ src_cov @ A.T
    R = int(spec.row_ptr[-1])
    H = np.zeros((R, T * p))
    for t in range(T):
        lo, hi = spec.row_ptr[t], spec.row_ptr[t + 1]
        H[lo:hi, t * p : (t + 1) * p] = spec.Z[lo:hi]
    S = H @ cov @ H.T + np.diag(spec.v)
    gain = np.linalg.solve(S, H @ cov).T
    resid = spec.y - H @ mean
    post_mean = mean + gain @ resid
    post_cov = cov - gain @ H @ cov
    _, logdet = np.linalg.slogdet(S)
    logdens = -0.5 * (R * np.log(2 * np.pi) + logdet + resid @ np.linalg.solve(S, resid))
    return post_mean.reshape(T, p), post_cov, float(logdens)
