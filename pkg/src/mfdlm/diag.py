"""Posterior summaries and MCMC diagnostics."""
from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import ndtr

from .errors import DataError
from .gibbs import group_offsets

log = logging.getLogger(__name__)

CHI2_1_95 = 3.84  # rounded 95th percentile of chi2_1, as conventionally quoted


# ---------------------------------------------------------------------------
# efficiency

def autocorrelation(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.size
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def effective_sample_size(draws) -> float:
    """Geyer's initial monotone sequence estimate; NaN for a constant series."""
    x = np.asarray(draws, dtype=float).ravel()
    n = x.size
    if n < 4 or not np.ptp(x) > 0:
        return math.nan
    rho = autocorrelation(x)
    n_pairs = n // 2
    gam = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    pos = np.flatnonzero(gam <= 0.0)
    m = pos[0] if pos.size else gam.size
    gam = np.minimum.accumulate(gam[:m])
    tau = -1.0 + 2.0 * float(gam.sum())
    if not tau > 0:
        return math.nan
    return n / tau


def efficiency_factor(draws) -> float:
    """ESS / N.  Needs at least 100 draws; returns NaN (flagged) for constant chains."""
    x = np.asarray(draws, dtype=float).ravel()
    if x.size < 100:
        raise ValueError("efficiency factors need at least 100 draws")
    ess = effective_sample_size(x)
    if math.isnan(ess):
        log.warning("efficiency factor undefined for a constant chain")
    return ess / x.size


# ---------------------------------------------------------------------------
# intervals

def hpd_interval(draws, mass: float = 0.95) -> tuple[float, float]:
    """Shortest window of ceil(mass * N) sorted draws."""
    x = np.sort(np.asarray(draws, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise ValueError("no draws")
    if not 0.0 < mass <= 1.0:
        raise ValueError("mass must lie in (0, 1]")
    k = min(n, int(math.ceil(mass * n - 1e-9)))
    widths = x[k - 1 :] - x[: n - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


# ---------------------------------------------------------------------------
# model comparison

def dic(chain, data=None) -> dict:
    """Plug-in DIC: Dbar + pD with pD = Dbar - D(posterior means of beta, f, sigma2)."""
    dev = np.asarray(getattr(chain, "deviance", []), dtype=float)
    if dev.size == 0:
        raise DataError("the chain has no stored deviance; re-run the fit with deviance monitoring")
    d_bar = float(dev.mean())
    if data is not None:
        from . import flc as flc_mod

        stats_ = flc_mod.SufficientStats(data, chain.basis)
        mode = "common" if chain.config.common_flc else "per-outcome"
        D = chain.mean("loadings")
        mean_flc = flc_mod.FlcState(mode, D, np.ones(D.shape[:2]))
        d_hat = flc_mod.deviance(stats_, chain.mean("beta"), mean_flc, chain.mean("sigma2"))
    elif chain.deviance_at_mean is not None:
        d_hat = float(chain.deviance_at_mean)
    else:
        raise DataError("deviance at the posterior means is unavailable; pass the data")
    p_d = d_bar - d_hat
    return {"DIC": d_bar + p_d, "Dbar": d_bar, "Dhat": d_hat, "pD": p_d}


# ---------------------------------------------------------------------------
# outliers

def exceedance_proportions(z, threshold: float = CHI2_1_95, df: int = 4):
    """Per-(t, c, k) and aggregate per-(t, c) exceedance proportions from residual draws (N, T, C, K)."""
    z2 = np.asarray(z, dtype=float) ** 2
    df = min(df, z2.shape[-1])
    single = np.mean(z2 > threshold, axis=0)
    agg = np.mean(z2[..., :df].sum(axis=-1) > stats.chi2.ppf(0.95, df), axis=0)
    return single, agg


def outlier_probabilities(chain, threshold: float = CHI2_1_95, df: int | None = None):
    """Exceedance proportions of squared standardized residuals.

    Uses stored residual draws when the chain monitored them, otherwise the
    running counts kept during the fit (per-factor threshold 3.84, aggregate
    over the first ``df`` factors at the chi2_df 95th percentile).
    """
    df = chain.config.outlier_df if df is None else df
    if "residuals" in chain.draws and len(chain.draws["residuals"]):
        return exceedance_proportions(chain.array("residuals"), threshold, df)
    if not chain.exceed or not chain.n_kept:
        raise DataError("the chain stores neither residual draws nor exceedance counts")
    if threshold != CHI2_1_95 or df != chain.config.outlier_df:
        raise DataError("stored counts use the default thresholds; monitor 'residuals' for other choices")
    n = chain.n_kept
    return np.asarray(chain.exceed["single"]) / n, np.asarray(chain.exceed["aggregate"]) / n


# ---------------------------------------------------------------------------
# contrasts

def parse_labels(labels: dict) -> dict:
    """time -> (unit, trial, bin) from 'unit:trial:bin' labels."""
    out = {}
    for t, lab in labels.items():
        parts = str(lab).split(":")
        if len(parts) != 3:
            raise DataError(f"label {lab!r} for time {t} is not of the form unit:trial:bin")
        out[int(t)] = tuple(int(p) for p in parts)
    return out


def contrast_functionals(beta_draws, loading_draws, basis, labels, groups, tau, coherence=(), contrast=None):
    """Posterior draws of unit-averaged group differences of mu = sum_k beta_k f_k.

    ``groups`` maps a group name to a set of (unit, trial) pairs;
    ``contrast`` names the (first, second) group, defaulting to the first two.
    Outcomes listed in ``coherence`` are mapped through the normal CDF before
    averaging.  Returns an array of shape (N, C, n_bins, len(tau)).
    """
    beta_draws = np.asarray(beta_draws, dtype=float)
    loading_draws = np.asarray(loading_draws, dtype=float)
    N, T, C, K = beta_draws.shape
    names = list(groups)
    g1, g2 = contrast if contrast is not None else names[:2]
    sets = {g1: set(map(tuple, groups[g1])), g2: set(map(tuple, groups[g2]))}
    where = parse_labels(labels)
    n_bins = max(b for _, _, b in where.values())
    units = sorted({u for u, _, _ in where.values()})
    Phi = basis.evaluate(tau)
    # times for (unit, group, bin)
    index: dict = {}
    for t, (u, s, b) in where.items():
        for g in (g1, g2):
            if (u, s) in sets[g]:
                index.setdefault((u, g, b), []).append(t - 1)
    used = []
    for u in units:
        if all((u, g, 1) in index for g in (g1, g2)):
            used.append(u)
        else:
            log.info("unit %d has an empty group and is excluded from the contrast", u)
    if not used:
        raise DataError("no unit has trials in both groups")
    out = np.zeros((N, C, n_bins, len(tau)))
    trans = np.zeros(C, bool)
    trans[list(coherence)] = True
    for i in range(N):
        D = loading_draws[i]
        curves = np.stack([Phi @ D[0 if D.shape[0] == 1 else c].T for c in range(C)])  # (C, m, K)
        mu = np.einsum("cmk,tck->tcm", curves, beta_draws[i])  # (T, C, m)
        mu[:, trans] = ndtr(mu[:, trans])
        for b in range(1, n_bins + 1):
            acc = 0.0
            for u in used:
                acc = acc + mu[index[(u, g1, b)]].mean(axis=0) - mu[index[(u, g2, b)]].mean(axis=0)
            out[i, :, b - 1] = acc / len(used)
    return out


# ---------------------------------------------------------------------------
# tables

def summary_rows(chain, groups=None) -> list[dict]:
    rows = []
    for group in groups or sorted(chain.draws):
        arr = chain.array(group)
        if arr.size == 0:
            continue
        off = np.asarray(group_offsets(group)) + 1
        for idx in np.ndindex(arr.shape[1:]):
            x = arr[(slice(None), *idx)]
            lo, hi = hpd_interval(x) if x.size else (math.nan, math.nan)
            ef = efficiency_factor(x) if x.size >= 100 else math.nan
            label = "[" + ",".join(str(int(i)) for i in np.asarray(idx) + off) + "]"
            rows.append({"param": f"{group}{label}", "mean": float(x.mean()), "hpd_lo": lo, "hpd_hi": hi, "ef": ef})
    return rows


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def format_table(rows) -> str:
    lines = [f"{'parameter':<24}{'mean':>12}{'HPD lo':>12}{'HPD hi':>12}"]
    for r in rows:
        lines.append(f"{r['param']:<24}{r['mean']:>12.4f}{r['hpd_lo']:>12.4f}{r['hpd_hi']:>12.4f}")
    return "\n".join(lines) + "\n"


def diagnose(chain, out_dir, groups=None, contrast_spec=None) -> dict:
    """Write ess.csv, hpd.csv, outliers.csv, contrasts.csv and summary.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = summary_rows(chain, groups)
    write_csv(out / "ess.csv", ["param", "ess", "efficiency"], [
        (r["param"], r["ef"] * chain.n_kept if not math.isnan(r["ef"]) else math.nan, r["ef"]) for r in rows
    ])
    write_csv(out / "hpd.csv", ["param", "mean", "hpd_lo", "hpd_hi"], [
        (r["param"], r["mean"], r["hpd_lo"], r["hpd_hi"]) for r in rows
    ])
    result = {"n_params": len(rows)}
    try:
        single, agg = outlier_probabilities(chain)
        T, C, K = single.shape
        out_rows = []
        for t in range(T):
            for c in range(C):
                for k in range(K):
                    out_rows.append((t + 1, c + 1, k + 1, float(single[t, c, k])))
                out_rows.append((t + 1, c + 1, "all", float(agg[t, c])))
        write_csv(out / "outliers.csv", ["t", "c", "k", "proportion"], out_rows)
        result["outliers"] = True
    except DataError as exc:
        log.info("no outlier output: %s", exc)
        write_csv(out / "outliers.csv", ["t", "c", "k", "proportion"], [])
        result["outliers"] = False
    c_rows = []
    if contrast_spec is not None:
        arr = contrast_functionals(**contrast_spec)
        tau = contrast_spec["tau"]
        for c in range(arr.shape[1]):
            for b in range(arr.shape[2]):
                for j, tv in enumerate(tau):
                    x = arr[:, c, b, j]
                    lo, hi = hpd_interval(x)
                    c_rows.append((c + 1, b + 1, float(tv), float(x.mean()), lo, hi))
    write_csv(out / "contrasts.csv", ["c", "bin", "tau", "mean", "hpd_lo", "hpd_hi"], c_rows)
    try:
        d = dic(chain)
        result["dic"] = d
    except DataError as exc:
        log.info("no DIC: %s", exc)
    text = format_table(rows)
    if "dic" in result:
        text += f"\nDIC {result['dic']['DIC']:.3f}  (Dbar {result['dic']['Dbar']:.3f}, pD {result['dic']['pD']:.3f})\n"
    (out / "summary.txt").write_text(text)
    return result
