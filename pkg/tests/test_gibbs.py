import json

import numpy as np
import pytest

from mfdlm import flc as flc_mod
from mfdlm import gibbs
from mfdlm.dataset import FunctionalDataset, SynthSpec, generate_synthetic
from mfdlm.errors import ConfigError, DataError
from mfdlm.gibbs import Chain, FitConfig, run


@pytest.fixture(scope="module")
def small():
    data, truth = generate_synthetic(SynthSpec(C=2, K=2, T=40, m=25, seed=2, gamma=np.array([[0, 0], [0.5, 0.3]]),
                                               psi=np.full((2, 2), 0.4)))
    return data, truth


def cfg(**kw):
    base = dict(K=2, M=8, iterations=40, burn_in=10, seed=1, progress_every=0)
    base.update(kw)
    return FitConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        FitConfig(K=0)
    with pytest.raises(ConfigError):
        FitConfig(K=2, model="var")
    with pytest.raises(ConfigError):
        FitConfig(K=2, iterations=10, burn_in=20)
    with pytest.raises(ConfigError):
        FitConfig.from_dict({"K": 2, "colour": 1})


def test_config_round_trip():
    c = cfg(model="common-trend-hmm", sv=True, hmm_prior=(1, 4, 1, 4), domain=(0, 1))
    assert FitConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_initialize_noiseless_exact():
    data, _ = generate_synthetic(SynthSpec(C=2, K=2, T=30, m=25, noise_var=0.0, seed=4))
    c = cfg(M=20)
    basis = gibbs.build_basis(data, c)
    state = gibbs.initialize(data, c, basis)
    grid, Y = gibbs.complete_data(data)
    fit = np.einsum("tck,km->ctm", state.beta, state.flc.D[0] @ basis.evaluate(grid).T)
    assert np.linalg.norm(Y - fit) / np.linalg.norm(Y) < 1e-8
    assert flc_mod.orthonormality_error(state.flc, basis.gram) < 1e-12


def test_initialize_svd_loadings_orthonormal(small):
    data, _ = small
    _, Y = gibbs.complete_data(data)
    _, _, Vt = np.linalg.svd(Y.reshape(-1, Y.shape[-1]), full_matrices=False)
    np.testing.assert_allclose(Vt[:3] @ Vt[:3].T, np.eye(3), atol=1e-12)


def test_initialize_deterministic(small):
    data, _ = small
    c = cfg()
    b = gibbs.build_basis(data, c)
    a1, a2 = gibbs.initialize(data, c, b), gibbs.initialize(data, c, b)
    np.testing.assert_array_equal(a1.flc.D, a2.flc.D)
    np.testing.assert_array_equal(a1.beta, a2.beta)


def test_k_exceeding_rank():
    tau = np.tile(np.linspace(0, 1, 12), 3)
    t = np.repeat([1, 2, 3], 12)
    data = FunctionalDataset(np.zeros(36), t, tau, np.tile(np.sin(np.linspace(0, 1, 12)), 3), (0, 1))
    c = cfg(K=2, M=4)
    with pytest.raises(DataError, match="rank"):
        gibbs.initialize(data, c, gibbs.build_basis(data, c))


def test_suggest_k_exact_rank(rng):
    grid = np.linspace(0, 1, 12)
    a, b = rng.standard_normal((2, 60))
    a, b = a - a.mean(), b - b.mean()
    Y = np.outer(a, np.sin(2 * np.pi * grid)) + 0.8 * np.outer(b, np.cos(2 * np.pi * grid))
    data = FunctionalDataset(np.zeros(Y.size), np.repeat(np.arange(1, 61), 12), np.tile(grid, 60), Y.ravel(), (0, 1))
    for lo, hi in [(0.8, 0.99), (0.9, 1 - 1e-11)]:
        out = gibbs.suggest_k_range(data, lo, hi)
        assert (out["K_min"], out["K_max"]) == (2, 2)


def test_suggest_k_fractions_match_svd(rng):
    tau = np.tile(np.linspace(0, 1, 10), 40)
    t = np.repeat(np.arange(1, 41), 10)
    data = FunctionalDataset(np.zeros(400), t, tau, rng.standard_normal(400), (0, 1))
    out = gibbs.suggest_k_range(data)
    X = data.y.reshape(40, 10)
    X = X - X.mean(0)
    sv = np.linalg.svd(X, compute_uv=False)
    np.testing.assert_allclose(out["fractions"], np.cumsum(sv**2) / np.sum(sv**2), rtol=1e-10)


def test_streams_are_independent_and_reproducible():
    a = gibbs.stream(1, "flc", 0, 0, 5).standard_normal(3)
    b = gibbs.stream(1, "flc", 0, 0, 5).standard_normal(3)
    c = gibbs.stream(1, "flc", 1, 0, 5).standard_normal(3)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_empty_chain(small, tmp_path):
    data, _ = small
    c = cfg(iterations=5, burn_in=5)
    chain = run(data, c, out_dir=tmp_path)
    assert chain.n_kept == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert FitConfig.from_dict(man["config"]) == c


def test_draw_invariants(small):
    data, _ = small
    chain = run(data, cfg(K=3, iterations=40, burn_in=10, monitor=("loadings", "lambda")))
    J = chain.basis.gram
    D = chain.array("loadings")
    lam = chain.array("lambda")
    for d, l in zip(D, lam):
        assert np.max(np.abs(d[0] @ J @ d[0].T - np.eye(3))) < 1e-8
        assert np.all(np.diff(l[0]) < 0)


def test_byte_identical_outputs(small, tmp_path):
    data, _ = small
    for name in ("a", "b"):
        run(data, cfg(monitor=gibbs.ALL_GROUPS[:5] + ("states",), model="common-trend-hmm"), out_dir=tmp_path / name)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "timings.json" not in files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_resume_matches_uninterrupted(small, tmp_path):
    data, _ = small
    full = run(data, cfg(iterations=30, burn_in=10), out_dir=tmp_path / "full")
    c = cfg(iterations=30, burn_in=10, checkpoint_every=20)
    run(data, FitConfig.from_dict({**c.to_dict(), "iterations": 20}), out_dir=tmp_path / "part")
    # the 20-iteration run wrote its own checkpoint at iteration 20
    resumed = run(data, c, out_dir=tmp_path / "res", resume=tmp_path / "part" / "checkpoint.json")
    np.testing.assert_array_equal(full.array("gamma"), resumed.array("gamma"))
    assert full.deviance == resumed.deviance


def test_chain_read_back(small, tmp_path):
    data, _ = small
    chain = run(data, cfg(monitor=("loadings", "gamma", "beta", "sigma2")), out_dir=tmp_path)
    back = Chain.read(tmp_path)
    np.testing.assert_array_equal(back.array("gamma"), chain.array("gamma"))
    np.testing.assert_array_equal(back.array("beta"), chain.array("beta"))
    assert back.n_kept == chain.n_kept
    np.testing.assert_allclose(back.mean("beta"), chain.mean("beta"), rtol=1e-12)


def test_gamma_file_indices_start_at_outcome_two(small, tmp_path):
    data, _ = small
    run(data, cfg(), out_dir=tmp_path)
    first = (tmp_path / "gamma.csv").read_text().splitlines()[:2]
    assert first[0].startswith("param,")
    assert first[1].split(",")[1] == "2"


@pytest.mark.parametrize("kw", [
    dict(model="common-trend-hmm"),
    dict(model="common-trend", sv=True),
    dict(common_flc=False),
    dict(K_linked=1),
])
def test_model_variants_run(small, kw):
    data, _ = small
    chain = run(data, cfg(iterations=25, burn_in=5, **kw))
    assert chain.n_kept == 20
    assert np.all(np.isfinite(chain.deviance))


def test_random_walk_runs():
    data, _ = generate_synthetic(SynthSpec(C=2, K=2, T=30, m=25, kind="random-walk", bins_per_trial=15, seed=3))
    assert gibbs.trial_starts(data).nonzero()[0].tolist() == [0, 15]
    chain = run(data, cfg(model="random-walk", iterations=25, burn_in=5, monitor=("walk_cov", "sigma2")))
    W = chain.array("walk_cov")
    assert W.shape == (20, 2, 2, 2)
    for w in W.reshape(-1, 2, 2):
        np.linalg.cholesky(w)


def test_missing_outcome_times():
    data, _ = generate_synthetic(SynthSpec(C=2, K=1, T=20, m=25, seed=8))
    keep = ~((data.outcome == 1) & (data.time % 4 == 0))
    ragged = FunctionalDataset(data.outcome[keep], data.time[keep], data.tau[keep], data.y[keep], data.domain)
    chain = run(ragged, cfg(K=1, iterations=20, burn_in=5))
    assert chain.n_kept == 15
