"""Acceptance criteria, each run at its stated tolerance.

Every test carries a ``criterion`` marker; the conftest hook prints one
PASS/FAIL line per criterion at the end of the session.
"""
import math
import time

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.linalg import null_space

from conftest import random_spd
from oracles import random_state_space, stacked_gaussian
from test_cgls import kkt_solve
from test_factormodels import enumerate_hmm
from test_vol import E_LOG_CHI2, GEWEKE_FUNCS, VAR_LOG_CHI2, geweke_pvalues

from mfdlm import diag, factormodels as fm, gibbs, tfa, vol
from mfdlm.cgls import GaussianFactor, sample_constrained, solve_constrained
from mfdlm.cli import main
from mfdlm.dataset import SynthSpec, generate_synthetic
from mfdlm.ssm import StateSpaceSpec, ffbs


def cov_se(cov, n):
    sd2 = np.diag(cov)
    return np.sqrt((cov**2 + np.outer(sd2, sd2)) / n)


@pytest.mark.criterion(1, "orthonormal loadings in every retained draw")
def test_orthonormality(record_property):
    data, _ = generate_synthetic(SynthSpec(C=2, K=3, T=200, m=25, seed=101))
    cfg = gibbs.FitConfig(K=3, iterations=500, burn_in=100, seed=1, progress_every=0, monitor=("loadings",))
    t0 = time.perf_counter()
    chain = gibbs.run(data, cfg)
    elapsed = time.perf_counter() - t0
    J = chain.basis.gram
    D = chain.array("loadings")
    err = max(np.max(np.abs(d[c] @ J @ d[c].T - np.eye(3))) for d in D for c in range(d.shape[0]))
    record_property("detail", f"max error {err:.2e} over {len(D)} draws, {elapsed:.0f} s")
    assert len(D) == 400
    assert err < 1e-8
    assert elapsed < 120


@pytest.mark.criterion(2, "constrained solve equals the dense KKT solve")
def test_constrained_solve_oracle(record_property):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 31))
        J = int(rng.integers(0, min(5, n - 1) + 1))
        P = random_spd(rng, n)
        b = rng.standard_normal(n)
        L = rng.standard_normal((n, J))
        got = solve_constrained(GaussianFactor(P, b, L if J else None))
        want = kkt_solve(P, b, L)
        worst = max(worst, np.max(np.abs(got - want)) / np.max(np.abs(want)))
    record_property("detail", f"max relative error {worst:.2e}")
    assert worst < 1e-9


@pytest.mark.criterion(3, "constrained sampler moments and constraints")
def test_constrained_sampler_moments(record_property):
    rng = np.random.default_rng(3)
    N = 100_000
    worst_z, worst_c = 0.0, 0.0
    for _ in range(10):
        n = int(rng.integers(2, 13))
        J = int(rng.integers(1, min(5, n - 1) + 1))
        g = GaussianFactor(random_spd(rng, n), rng.standard_normal(n), rng.standard_normal((n, J)))
        # covariance restricted to the null space of L'
        Q = null_space(g.constraints.T)
        B = Q @ np.linalg.solve(Q.T @ g.precision @ Q, Q.T)
        mean = B @ g.linear
        x = sample_constrained(g, rng, rng.standard_normal((n, N))).T
        worst_c = max(worst_c, np.max(np.abs(x @ g.constraints)))
        se_m = np.sqrt(np.diag(B) / N)
        # the constrained covariance is singular; rounding noise needs a floor
        floor = 1e-12 * np.max(np.abs(B))
        worst_z = max(worst_z, np.max(np.abs(x.mean(0) - mean) / (se_m + floor)))
        worst_z = max(worst_z, np.max(np.abs(np.cov(x.T) - B) / (cov_se(B, N) + floor)))
    record_property("detail", f"max |z| {worst_z:.2f}, max constraint residual {worst_c:.1e}")
    assert worst_z < 5
    assert worst_c < 1e-10


@pytest.mark.criterion(4, "FFBS draws match the dense joint conditional")
def test_ffbs_exactness(record_property):
    rng = np.random.default_rng(4)
    N = 100_000
    worst_z, worst_ll = 0.0, 0.0
    for T, p in [(1, 1), (3, 2), (4, 3), (5, 4)]:
        spec = StateSpaceSpec(*random_state_space(rng, T, p))
        want_m, want_c, logdens = stacked_gaussian(spec.G, spec.W, spec.row_ptr, spec.Z, spec.y, spec.v, spec.m0,
                                                   spec.P0)
        runs = [ffbs(spec, rng) for _ in range(N)]
        worst_ll = max(worst_ll, max(abs(r.loglik - logdens) for r in runs[:100]))
        x = np.stack([r.draws.ravel() for r in runs])
        se_m = np.sqrt(np.diag(want_c) / N)
        worst_z = max(worst_z, np.max(np.abs(x.mean(0) - want_m.ravel()) / se_m))
        worst_z = max(worst_z, np.max(np.abs(np.cov(x.T) - want_c) / cov_se(want_c, N)))
    record_property("detail", f"max |z| {worst_z:.2f}, max log-likelihood error {worst_ll:.1e}")
    assert worst_z < 5
    assert worst_ll < 1e-6


@pytest.mark.criterion(5, "HMM marginals match path enumeration")
def test_hmm_enumeration(record_property):
    rng = np.random.default_rng(5)
    T = 8
    worst = 0.0
    for q01, q10, gamma, psi in [(0.2, 0.3, 0.9, 0.3), (0.05, 0.1, 0.5, -0.4), (0.5, 0.5, 1.5, 0.7)]:
        x = rng.normal(0, 1.5, T)
        s_true = rng.integers(0, 2, T)
        y = gamma * s_true * x + 0.5 * rng.standard_normal(T)
        var = rng.uniform(0.1, 0.5, T)
        want = enumerate_hmm(y, x, gamma, psi, var, q01, q10, fm.stationary_prob(q01, q10))
        draws = np.array([fm.sample_hmm_states(y, x, gamma, psi, var, q01, q10, rng) for _ in range(100_000)])
        worst = max(worst, np.max(np.abs(draws.mean(0) - want)))
    record_property("detail", f"max marginal error {worst:.4f}")
    assert worst < 0.01


@pytest.mark.slow
@pytest.mark.criterion(6, "synthetic posterior recovery")
def test_posterior_recovery(record_property):
    gamma = np.array([[0.0, 0.0], [0.6, 0.3], [0.5, 0.2]])
    grid = np.linspace(0.0, 1.0, 2001)
    covered, inner = 0, []
    t0 = time.perf_counter()
    for seed in (1, 2, 3):
        spec = SynthSpec(C=3, K=2, T=300, gamma=gamma, psi=np.full((3, 2), 0.5), seed=seed)
        data, truth = generate_synthetic(spec)
        cfg = gibbs.FitConfig(K=2, iterations=3000, burn_in=1000, seed=seed, progress_every=0,
                              monitor=("loadings", "gamma"))
        chain = gibbs.run(data, cfg)
        g = chain.array("gamma")  # outcomes 2..C
        for c in range(1, 3):
            for k in range(2):
                lo, hi = diag.hpd_interval(g[:, c - 1, k])
                covered += lo <= gamma[c, k] <= hi
        f_true = truth["basis"].evaluate(grid) @ truth["loadings"].T
        f_hat = chain.basis.evaluate(grid) @ chain.mean("loadings")[0].T
        inner += [abs(trapezoid(f_hat[:, k] * f_true[:, k], grid)) for k in range(2)]
    elapsed = time.perf_counter() - t0
    record_property("detail", f"coverage {covered}/12, min |<f_hat, f>| {min(inner):.4f}, {elapsed / 60:.1f} min")
    assert covered >= 10
    assert min(inner) > 0.95
    assert elapsed < 15 * 60


@pytest.mark.criterion(7, "time-frequency pipeline invariants")
def test_time_frequency(record_property):
    rng = np.random.default_rng(7)
    for N in (16, 160, 256, 4800):
        assert tfa.bin_signal(rng.standard_normal(N)).shape[0] == 15
    worst_deg = 0.0
    for n in (8, 30, 64):
        _, I = tfa.periodograms(rng.standard_normal((2, n)))
        lhs = np.abs(I[0, 1]) ** 2
        rhs = np.real(I[0, 0]) * np.real(I[1, 1])
        worst_deg = max(worst_deg, np.max(np.abs(lhs - rhs)) / rhs.max())
    k_min, k_max, self_err = 1.0, 0.0, 0.0
    for _ in range(20):
        x = rng.standard_normal((3, 600))
        x[1] += rng.uniform(0, 2) * x[0]
        S = tfa.smoothed_spectra(x)
        a = np.real(S[0, 0])
        k2, _ = tfa.coherence_transform(a, np.real(S[1, 1]), S[0, 1])
        k_min, k_max = min(k_min, k2.min()), max(k_max, k2.max())
        k_self, _ = tfa.coherence_transform(a, a, S[0, 0])
        self_err = max(self_err, np.max(np.abs(k_self - 1.0)))
    record_property("detail", f"degeneracy error {worst_deg:.1e}, kappa2 in [{k_min:.3f}, {k_max:.3f}], "
                              f"self-coherence error {self_err:.1e}")
    assert worst_deg < 1e-12
    assert 0.0 <= k_min and k_max <= 1.0
    assert self_err < 1e-12


@pytest.mark.criterion(8, "diagnostics calibration")
def test_diagnostics_calibration(record_property):
    rng = np.random.default_rng(8)
    ef_iid = diag.efficiency_factor(rng.standard_normal(20_000))
    e = rng.standard_normal(200_000)
    ar = np.empty_like(e)
    ar[0] = e[0] / math.sqrt(0.75)
    for t in range(1, e.size):
        ar[t] = 0.5 * ar[t - 1] + e[t]
    ef_ar = diag.efficiency_factor(ar)
    lo, hi = diag.hpd_interval(rng.standard_normal(1_000_000))
    single, _ = diag.exceedance_proportions(rng.standard_normal((2000, 50, 2, 4)))
    prop = float(single.mean())
    record_property("detail", f"EF iid {ef_iid:.3f}, EF AR(1) {ef_ar:.3f}, HPD ({lo:.3f}, {hi:.3f}), "
                              f"exceedance {prop:.4f}")
    assert 0.9 < ef_iid < 1.1
    assert abs(ef_ar - 1 / 3) < 0.05
    assert abs(lo + 1.96) < 0.02 and abs(hi - 1.96) < 0.02
    assert abs(prop - 0.05) < 0.01


@pytest.mark.criterion(9, "stochastic volatility sanity")
def test_stochastic_volatility(record_property, monkeypatch):
    mean, var = vol.mixture_moments()
    assert abs(mean - E_LOG_CHI2) < 0.01 and abs(var - VAR_LOG_CHI2) < 0.01

    rng = np.random.default_rng(9)
    T = 2000
    w = rng.standard_normal(T)
    st = vol.initial_sv_state(0.0, T)
    acc = np.zeros(T)
    for it in range(1500):
        st = vol.sample_sv_path(w, st, rng)
        if it >= 500:
            acc += np.exp(st.h)
    post = acc / 1000
    flat = float(np.mean((post > 0.7) & (post < 1.4)))
    assert flat >= 0.95

    # successive-conditional check; a tighter level prior shortens the chain's memory
    monkeypatch.setattr(vol, "XI0_PRIOR_VAR", 1.0)
    pvals = geweke_pvalues(list(GEWEKE_FUNCS.values()), seed=99)
    record_property("detail", f"mixture mean {mean:.4f} var {var:.4f}, flat fraction {flat:.3f}, "
                              f"min Geweke p {min(pvals):.3f}")
    assert min(pvals) > 0.001


@pytest.mark.criterion(10, "fit output is byte-identical across runs")
def test_determinism(tmp_path, record_property):
    spec = tmp_path / "spec.yaml"
    spec.write_text("C: 3\nK: 2\nT: 60\nkind: common-trend\nseed: 10\n")
    assert main(["simulate", "--spec", str(spec), "--out", str(tmp_path / "d.csv")]) == 0
    cfg = tmp_path / "fit.yaml"
    cfg.write_text("K: 2\nM: 10\nmodel: common-trend-hmm\niterations: 60\nburn_in: 20\nprogress_every: 0\n"
                   "monitor: [beta, loadings, lambda, gamma, psi, q01, q10, states, sigma2]\n")
    for name in ("a", "b"):
        assert main(["fit", "--config", str(cfg), "--data", str(tmp_path / "d.csv"), "--seed", "42",
                     "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    record_property("detail", f"{sum(same)}/{len(files)} files identical")
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    assert all(same)
