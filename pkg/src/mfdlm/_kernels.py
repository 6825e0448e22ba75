"""Hot inner loops.

Each kernel exists as a numba-compiled loop and as a numpy path.  All random
inputs (standard normals, uniforms) are drawn by the caller and passed in, so
both paths consume identical random streams and agree to rounding error.
``USE_NUMBA`` picks the path used by the public dispatchers.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import linalg as sla

from ._compat import HAS_NUMBA, jit

USE_NUMBA = HAS_NUMBA

# status codes returned by the compiled FFBS kernel
OK = 0
BAD_FORECAST_VARIANCE = 1
BAD_FILTER_COVARIANCE = 2
BAD_SMOOTHER_COVARIANCE = 3

_PSD_TOL = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# small dense helpers (compiled when numba is active)

@jit(cache=True)
def _cholesky(a):
    n = a.shape[0]
    low = np.zeros_like(a)
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= low[j, k] * low[j, k]
        if s <= 0.0:
            return low, False
        d = math.sqrt(s)
        low[j, j] = d
        for i in range(j + 1, n):
            s = a[i, j]
            for k in range(j):
                s -= low[i, k] * low[j, k]
            low[i, j] = s / d
    return low, True


@jit(cache=True)
def _sqrt_psd(a):
    """Return (S, min_eig) with S S' = a; eigen fallback when Cholesky fails."""
    low, ok = _cholesky(a)
    if ok:
        return low, 0.0
    vals, vecs = np.linalg.eigh(a)
    scale = max(1.0, np.max(np.abs(vals)))
    out = np.empty_like(a)
    for j in range(a.shape[0]):
        r = math.sqrt(vals[j]) if vals[j] > 0.0 else 0.0
        for i in range(a.shape[0]):
            out[i, j] = vecs[i, j] * r
    return out, np.min(vals) / scale


@jit(cache=True)
def _psd_solve(a, b):
    """Solve a x = b for symmetric PSD a (pseudo-inverse on the null space)."""
    low, ok = _cholesky(a)
    if ok:
        n = a.shape[0]
        x = b.copy()
        for col in range(b.shape[1]):
            for i in range(n):
                s = x[i, col]
                for k in range(i):
                    s -= low[i, k] * x[k, col]
                x[i, col] = s / low[i, i]
            for i in range(n - 1, -1, -1):
                s = x[i, col]
                for k in range(i + 1, n):
                    s -= low[k, i] * x[k, col]
                x[i, col] = s / low[i, i]
        return x
    vals, vecs = np.linalg.eigh(a)
    tol = 1e-12 * max(1.0, np.max(np.abs(vals)))
    inv = np.zeros(vals.shape[0])
    for i in range(vals.shape[0]):
        if vals[i] > tol:
            inv[i] = 1.0 / vals[i]
    return vecs @ (np.diag(inv) @ (vecs.T @ b))


# ---------------------------------------------------------------------------
# forward filtering, backward sampling

@jit(cache=True)
def _ffbs_sequential(G, W, row_ptr, Z, y, v, m0, P0, normals):
    T = G.shape[0]
    p = m0.shape[0]
    filt_m = np.empty((T, p))
    filt_P = np.empty((T, p, p))
    pred_a = np.empty((T, p))
    pred_R = np.empty((T, p, p))
    draws = np.empty((T, p))
    m = m0.copy()
    P = P0.copy()
    loglik = 0.0
    for t in range(T):
        a = G[t] @ m
        R = G[t] @ P @ G[t].T + W[t]
        pred_a[t] = a
        pred_R[t] = R
        m = a.copy()
        P = R.copy()
        for r in range(row_ptr[t], row_ptr[t + 1]):
            z = Z[r]
            s = P @ z
            f = z @ s + v[r]
            if not f > 0.0:
                return draws, loglik, BAD_FORECAST_VARIANCE, t
            e = y[r] - z @ m
            k = s / f
            m = m + k * e
            # scalar Joseph form: (I - k z') P (I - k z')' + v k k'
            P = P - np.outer(k, s) - np.outer(s, k) + f * np.outer(k, k)
            loglik -= 0.5 * (_LOG_2PI + math.log(f) + e * e / f)
        P = 0.5 * (P + P.T)
        for i in range(p):
            if P[i, i] < -_PSD_TOL:
                return draws, loglik, BAD_FILTER_COVARIANCE, t
        filt_m[t] = m
        filt_P[t] = P

    S, mineig = _sqrt_psd(filt_P[T - 1])
    if mineig < -_PSD_TOL:
        return draws, loglik, BAD_SMOOTHER_COVARIANCE, T - 1
    draws[T - 1] = filt_m[T - 1] + S @ normals[T - 1]
    for t in range(T - 2, -1, -1):
        Pt = filt_P[t]
        GP = G[t + 1] @ Pt
        # J' = R^{-1} G P
        Jt = _psd_solve(pred_R[t + 1], GP)
        mean = filt_m[t] + Jt.T @ (draws[t + 1] - pred_a[t + 1])
        cov = Pt - Jt.T @ GP
        cov = 0.5 * (cov + cov.T)
        S, mineig = _sqrt_psd(cov)
        if mineig < -_PSD_TOL:
            return draws, loglik, BAD_SMOOTHER_COVARIANCE, t
        draws[t] = mean + S @ normals[t]
    return draws, loglik, OK, -1


def _sqrt_psd_np(a):
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(a)
        scale = max(1.0, float(np.max(np.abs(vals))))
        return vecs * np.sqrt(np.clip(vals, 0.0, None)), float(vals.min()) / scale


def _psd_solve_np(a, b):
    try:
        return sla.cho_solve(sla.cho_factor(a, lower=True), b)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(a, rcond=1e-12, hermitian=True) @ b


def _ffbs_blocked(G, W, row_ptr, Z, y, v, m0, P0, normals):
    """Numpy path: all observation rows of one time step updated jointly."""
    T = G.shape[0]
    p = m0.shape[0]
    filt_m = np.empty((T, p))
    filt_P = np.empty((T, p, p))
    pred_a = np.empty((T, p))
    pred_R = np.empty((T, p, p))
    draws = np.empty((T, p))
    m, P = m0.copy(), P0.copy()
    loglik = 0.0
    eye = np.eye(p)
    for t in range(T):
        a = G[t] @ m
        R = G[t] @ P @ G[t].T + W[t]
        pred_a[t], pred_R[t] = a, R
        lo, hi = row_ptr[t], row_ptr[t + 1]
        if hi > lo:
            Zt = Z[lo:hi]
            vt = v[lo:hi]
            Sf = Zt @ R @ Zt.T + np.diag(vt)
            try:
                cf = sla.cho_factor(Sf, lower=True)
            except np.linalg.LinAlgError:
                return draws, loglik, BAD_FORECAST_VARIANCE, t
            e = y[lo:hi] - Zt @ a
            gain = sla.cho_solve(cf, Zt @ R).T
            m = a + gain @ e
            IKZ = eye - gain @ Zt
            P = IKZ @ R @ IKZ.T + (gain * vt) @ gain.T
            logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
            loglik -= 0.5 * ((hi - lo) * _LOG_2PI + logdet + e @ sla.cho_solve(cf, e))
        else:
            m, P = a, R
        P = 0.5 * (P + P.T)
        if np.any(np.diag(P) < -_PSD_TOL):
            return draws, loglik, BAD_FILTER_COVARIANCE, t
        filt_m[t], filt_P[t] = m, P

    S, mineig = _sqrt_psd_np(filt_P[-1])
    if mineig < -_PSD_TOL:
        return draws, loglik, BAD_SMOOTHER_COVARIANCE, T - 1
    draws[-1] = filt_m[-1] + S @ normals[-1]
    for t in range(T - 2, -1, -1):
        GP = G[t + 1] @ filt_P[t]
        Jt = _psd_solve_np(pred_R[t + 1], GP)
        mean = filt_m[t] + Jt.T @ (draws[t + 1] - pred_a[t + 1])
        cov = filt_P[t] - Jt.T @ GP
        S, mineig = _sqrt_psd_np(0.5 * (cov + cov.T))
        if mineig < -_PSD_TOL:
            return draws, loglik, BAD_SMOOTHER_COVARIANCE, t
        draws[t] = mean + S @ normals[t]
    return draws, loglik, OK, -1


def ffbs_kernel(G, W, row_ptr, Z, y, v, m0, P0, normals, use_numba=None):
    use = USE_NUMBA if use_numba is None else (use_numba and HAS_NUMBA)
    fn = _ffbs_sequential if use else _ffbs_blocked
    return fn(G, W, row_ptr, Z, y, v, m0, P0, normals)


# ---------------------------------------------------------------------------
# two-state chain with pairwise potentials

def _hmm_pair_ffbs_py(log_init, log_pair, uniforms):
    """Forward-sum backward-sample for a 2-state chain.

    ``log_init[b]`` is the log potential of s_0 = b and ``log_pair[t, a, b]``
    the log potential of (s_{t-1}, s_t) = (a, b) for t >= 1 (``log_pair[0]``
    is ignored).  Returns the sampled path and the filtered P(s_t = 1).
    """
    T = log_pair.shape[0]
    alpha = np.empty((T, 2))
    mx = max(log_init[0], log_init[1])
    a0 = math.exp(log_init[0] - mx)
    a1 = math.exp(log_init[1] - mx)
    tot = a0 + a1
    alpha[0, 0] = a0 / tot
    alpha[0, 1] = a1 / tot
    for t in range(1, T):
        mx = log_pair[t, 0, 0]
        for i in range(2):
            for j in range(2):
                if log_pair[t, i, j] > mx:
                    mx = log_pair[t, i, j]
        n0 = alpha[t - 1, 0] * math.exp(log_pair[t, 0, 0] - mx) + alpha[t - 1, 1] * math.exp(log_pair[t, 1, 0] - mx)
        n1 = alpha[t - 1, 0] * math.exp(log_pair[t, 0, 1] - mx) + alpha[t - 1, 1] * math.exp(log_pair[t, 1, 1] - mx)
        tot = n0 + n1
        alpha[t, 0] = n0 / tot
        alpha[t, 1] = n1 / tot
    path = np.empty(T, dtype=np.int64)
    path[T - 1] = 1 if uniforms[T - 1] < alpha[T - 1, 1] else 0
    for t in range(T - 1, 0, -1):
        b = path[t]
        l0 = log_pair[t, 0, b]
        l1 = log_pair[t, 1, b]
        mx = max(l0, l1)
        w0 = alpha[t - 1, 0] * math.exp(l0 - mx)
        w1 = alpha[t - 1, 1] * math.exp(l1 - mx)
        path[t - 1] = 1 if uniforms[t - 1] * (w0 + w1) < w1 else 0
    return path, alpha[:, 1].copy()


_hmm_pair_ffbs_nb = jit(cache=True)(_hmm_pair_ffbs_py)


def hmm_pair_ffbs(log_init, log_pair, uniforms, use_numba=None):
    use = USE_NUMBA if use_numba is None else (use_numba and HAS_NUMBA)
    fn = _hmm_pair_ffbs_nb if use else _hmm_pair_ffbs_py
    return fn(
        np.ascontiguousarray(log_init, dtype=np.float64),
        np.ascontiguousarray(log_pair, dtype=np.float64),
        np.ascontiguousarray(uniforms, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# mixture indicators for the log-chi2 approximation

@jit(cache=True)
def _mixture_draw_nb(resid, log_w, means, variances, uniforms):
    T = resid.shape[0]
    J = means.shape[0]
    out = np.empty(T, dtype=np.int64)
    lp = np.empty(J)
    for t in range(T):
        mx = -np.inf
        for j in range(J):
            d = resid[t] - means[j]
            lp[j] = log_w[j] - 0.5 * math.log(variances[j]) - 0.5 * d * d / variances[j]
            if lp[j] > mx:
                mx = lp[j]
        tot = 0.0
        for j in range(J):
            lp[j] = math.exp(lp[j] - mx)
            tot += lp[j]
        target = uniforms[t] * tot
        acc = 0.0
        out[t] = J - 1
        for j in range(J):
            acc += lp[j]
            if target < acc:
                out[t] = j
                break
    return out


def _mixture_draw_np(resid, log_w, means, variances, uniforms):
    d = resid[:, None] - means[None, :]
    lp = log_w - 0.5 * np.log(variances) - 0.5 * d * d / variances
    p = np.exp(lp - lp.max(axis=1, keepdims=True))
    cum = np.cumsum(p, axis=1)
    idx = np.sum(cum < (uniforms * cum[:, -1])[:, None], axis=1)
    return np.minimum(idx, means.shape[0] - 1).astype(np.int64)


def mixture_draw(resid, log_w, means, variances, uniforms, use_numba=None):
    use = USE_NUMBA if use_numba is None else (use_numba and HAS_NUMBA)
    fn = _mixture_draw_nb if use else _mixture_draw_np
    return fn(
        np.ascontiguousarray(resid, dtype=np.float64),
        np.ascontiguousarray(log_w, dtype=np.float64),
        np.ascontiguousarray(means, dtype=np.float64),
        np.ascontiguousarray(variances, dtype=np.float64),
        np.ascontiguousarray(uniforms, dtype=np.float64),
    )
