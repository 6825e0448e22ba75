"""Initialization and the four-block Gibbs sampler.

One iteration runs, in order: the loading-curve sweep, a joint FFBS draw of
all factor paths, the submodel parameter updates, and the variance updates.
Every random draw comes from a stream keyed by (seed, block, k, c,
iteration), so a run is reproducible bit for bit and can be resumed from a
checkpoint without changing its output.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.interpolate import CubicSpline

from . import __version__, factormodels as fm, flc as flc_mod, ssm, vol
from .basis import SplineBasis
from .cgls import GaussianFactor, solve_constrained
from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
BLOCKS = ("flc", "factors", "params", "variances")
_STREAM = {"init": 0, "flc": 1, "ffbs": 2, "gamma": 3, "psi": 4, "hmm": 5, "q": 6, "sigma2": 7, "sv": 8, "walk": 9}
DEFAULT_MONITOR = ("loadings", "lambda", "gamma", "psi", "sigma2")
ALL_GROUPS = (
    "loadings", "lambda", "gamma", "psi", "sigma2", "beta", "q01", "q10", "states",
    "xi0", "xi1", "sigma_h2", "innovation_var", "walk_cov", "residuals",
)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class FitConfig:
    K: int
    M: int = 20
    common_flc: bool = True
    model: str = "common-trend"
    K_linked: int | None = None
    sv: bool = False
    iterations: int = 7000
    burn_in: int = 2000
    seed: int = 0
    monitor: tuple[str, ...] = DEFAULT_MONITOR
    knots: str = "quantile"
    domain: tuple[float, float] | None = None
    max_grid: int = 200
    checkpoint_every: int = 0
    progress_every: int = 100
    hmm_prior: tuple[float, float, float, float] = fm.BETA_PRIOR
    obs_prior: tuple[float, float] = vol.GAMMA_PRIOR
    walk_rho: float | None = None
    outlier_df: int = 4

    def __post_init__(self):
        self.monitor = tuple(self.monitor)
        self.hmm_prior = tuple(float(v) for v in self.hmm_prior)
        self.obs_prior = tuple(float(v) for v in self.obs_prior)
        if self.domain is not None:
            self.domain = tuple(float(v) for v in self.domain)
        self.validate()

    def validate(self):
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if self.M < 1:
            raise ConfigError("M must be at least 1")
        if self.model not in fm.MODEL_KINDS:
            raise ConfigError(f"model must be one of {fm.MODEL_KINDS}, got {self.model!r}")
        k_linked = self.K if self.K_linked is None else self.K_linked
        if not 1 <= k_linked <= self.K:
            raise ConfigError(f"K_linked must lie in [1, K], got {self.K_linked}")
        if self.iterations < 0 or not 0 <= self.burn_in <= self.iterations:
            raise ConfigError("need 0 <= burn_in <= iterations")
        if self.knots not in ("quantile", "equal"):
            raise ConfigError("knots must be 'quantile' or 'equal'")
        unknown = set(self.monitor) - set(ALL_GROUPS)
        if unknown:
            raise ConfigError(f"unknown monitored groups {sorted(unknown)}; choose from {ALL_GROUPS}")
        if self.max_grid < self.K + 1:
            raise ConfigError("max_grid must exceed K")
        if self.checkpoint_every < 0 or self.progress_every < 0:
            raise ConfigError("checkpoint_every and progress_every must be non-negative")
        if self.outlier_df < 1:
            raise ConfigError("outlier_df must be at least 1")

    @property
    def k_linked(self) -> int:
        return self.K if self.K_linked is None else int(self.K_linked)

    @classmethod
    def from_dict(cls, raw: dict) -> FitConfig:
        raw = dict(raw)
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "K" not in raw:
            raise ConfigError("config must set K")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("monitor", "hmm_prior", "obs_prior", "domain"):
            if out[key] is not None:
                out[key] = list(out[key])
        return out


# ---------------------------------------------------------------------------
# model state

@dataclass
class ModelState:
    flc: flc_mod.FlcState
    beta: np.ndarray  # (T, C, K)
    sigma2: np.ndarray  # (C,)
    params: fm.FactorParams
    innov_var: np.ndarray  # (T, C, K)
    sv: list | None = None  # [c][k] -> SvState
    iteration: int = 0

    def to_json(self) -> dict:
        p = self.params
        out = {
            "iteration": self.iteration,
            "flc": {"mode": self.flc.mode, "D": self.flc.D.tolist(), "lam": self.flc.lam.tolist(), "ref": self.flc.ref.tolist()},
            "beta": self.beta.tolist(),
            "sigma2": self.sigma2.tolist(),
            "innov_var": self.innov_var.tolist(),
            "params": {
                "gamma": p.gamma.tolist(), "psi": p.psi.tolist(), "s": p.s.tolist(),
                "q01": p.q01.tolist(), "q10": p.q10.tolist(), "K_linked": p.K_linked,
                "walk_cov": None if p.walk_cov is None else p.walk_cov.tolist(),
                "trial_start": None if p.trial_start is None else p.trial_start.astype(int).tolist(),
            },
            "sv": None,
        }
        if self.sv is not None:
            out["sv"] = [
                [{"h": s.h.tolist(), "xi0": s.xi0, "xi1": s.xi1, "sigma_h2": s.sigma_h2, "r": s.r.tolist()} for s in row]
                for row in self.sv
            ]
        return out

    @classmethod
    def from_json(cls, raw: dict) -> ModelState:
        f = raw["flc"]
        p = raw["params"]
        params = fm.FactorParams(
            np.asarray(p["gamma"], float), np.asarray(p["psi"], float), np.asarray(p["s"], np.int64),
            np.asarray(p["q01"], float), np.asarray(p["q10"], float), int(p["K_linked"]),
            None if p["walk_cov"] is None else np.asarray(p["walk_cov"], float),
            None if p["trial_start"] is None else np.asarray(p["trial_start"], bool),
        )
        sv = None
        if raw["sv"] is not None:
            sv = [
                [vol.SvState(np.asarray(s["h"], float), s["xi0"], s["xi1"], s["sigma_h2"], np.asarray(s["r"], np.int64)) for s in row]
                for row in raw["sv"]
            ]
        return cls(
            flc_mod.FlcState(f["mode"], np.asarray(f["D"], float), np.asarray(f["lam"], float), np.asarray(f["ref"], float)),
            np.asarray(raw["beta"], float), np.asarray(raw["sigma2"], float), params,
            np.asarray(raw["innov_var"], float), sv, int(raw["iteration"]),
        )


def stream(seed: int, block: str, k: int = -1, c: int = -1, iteration: int = 0) -> np.random.Generator:
    """Independent generator for one (block, k, c, iteration) cell."""
    key = (_STREAM[block], k + 1, c + 1, iteration)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


# ---------------------------------------------------------------------------
# data completion and initialization

def _grid(points: np.ndarray, max_grid: int) -> np.ndarray:
    pts = np.unique(points)
    if pts.size <= max_grid:
        return pts
    idx = np.unique(np.round(np.linspace(0, pts.size - 1, max_grid)).astype(int))
    return pts[idx]


def complete_data(data, max_grid: int = 200):
    """Interpolate every (c, t) curve onto a shared grid; used for initialization only.

    Each curve is interpolated by a natural cubic spline through its own points
    and held constant beyond them.  Outcome-times with no data are filled with
    the outcome's average completed curve.  Returns ``(grid, Y)`` with ``Y`` of
    shape (C, T, len(grid)).
    """
    grid = _grid(data.tau, max_grid)
    C, T = data.C, data.T
    Y = np.full((C, T, grid.size), np.nan)
    oc, ot, starts = data.pairs()
    for i in range(oc.size):
        tau = data.tau[starts[i] : starts[i + 1]]
        y = data.y[starts[i] : starts[i + 1]]
        if tau.size == 1:
            Y[oc[i], ot[i] - 1] = y[0]
            continue
        x = np.clip(grid, tau[0], tau[-1])
        if tau.size == 2:
            Y[oc[i], ot[i] - 1] = np.interp(x, tau, y)
        else:
            Y[oc[i], ot[i] - 1] = CubicSpline(tau, y, bc_type="natural")(x)
    for c in range(C):
        miss = np.isnan(Y[c, :, 0])
        if miss.any():
            Y[c, miss] = np.nanmean(Y[c], axis=0)
    return grid, Y


def suggest_k_range(data, lower: float = 0.80, upper: float = 0.99, max_grid: int = 200) -> dict:
    """Smallest K reaching each cumulative share of (centered) variance.

    Add one to either value to account for the centering step.
    """
    if not 0.0 < lower <= upper <= 1.0:
        raise ValueError("need 0 < lower <= upper <= 1")
    _, Y = complete_data(data, max_grid)
    X = Y.reshape(-1, Y.shape[-1])
    X = X - X.mean(axis=0, keepdims=True)
    sv = np.linalg.svd(X, compute_uv=False)
    frac = np.cumsum(sv**2) / np.sum(sv**2)
    k_min = int(np.searchsorted(frac, lower - 1e-15) + 1)
    k_max = int(np.searchsorted(frac, upper - 1e-15) + 1)
    return {
        "K_min": min(k_min, sv.size), "K_max": min(k_max, sv.size), "fractions": frac.tolist(),
        "note": "increase K_min/K_max by one to account for the centering",
    }


def _orthonormalize(D, beta, J):
    """Make rows of every D[g] J-orthonormal while keeping beta D fixed."""
    for g in range(D.shape[0]):
        L = np.linalg.cholesky(D[g] @ J @ D[g].T)
        D[g] = np.linalg.solve(L, D[g])
        cols = slice(None) if D.shape[0] == 1 else g
        beta[:, cols, :] = beta[:, cols, :] @ L
    return D, beta


def build_basis(data, cfg: FitConfig) -> SplineBasis:
    return SplineBasis.from_points(data.tau, cfg.M, domain=data.domain, method=cfg.knots)


def trial_starts(data) -> np.ndarray | None:
    """Mark times whose 'unit:trial:bin' label starts a new (unit, trial)."""
    if not data.labels:
        return None
    T = data.T
    starts = np.zeros(T, bool)
    prev = None
    for t in range(1, T + 1):
        lab = data.labels.get(t)
        parts = lab.split(":") if lab else None
        key = tuple(parts[:2]) if parts and len(parts) >= 3 else None
        starts[t - 1] = key is None or key != prev
        prev = key
    return starts


def initialize(data, cfg: FitConfig, basis: SplineBasis, stats_: flc_mod.SufficientStats | None = None) -> ModelState:
    """Deterministic starting state from an SVD of the completed data."""
    stats_ = stats_ or flc_mod.SufficientStats(data, basis)
    C, T, K, n = data.C, data.T, cfg.K, basis.n
    grid, Y = complete_data(data, cfg.max_grid)
    mode = "common" if cfg.common_flc else "per-outcome"
    G = 1 if cfg.common_flc else C
    Phi = basis.evaluate(grid)
    D = np.zeros((G, K, n))
    beta = np.zeros((T, C, K))
    blocks = [Y.reshape(C * T, -1)] if cfg.common_flc else [Y[c] for c in range(C)]
    for g, X in enumerate(blocks):
        U, S, Vt = np.linalg.svd(X, full_matrices=False)
        rank = int(np.sum(S > S[0] * max(X.shape) * np.finfo(float).eps)) if S[0] > 0 else 0
        if K > rank:
            raise DataError(f"K = {K} exceeds the rank {rank} of the completed data matrix; choose a smaller K")
        fac = U[:, :K] * S[:K]
        if cfg.common_flc:
            beta[:] = fac.reshape(C, T, K).transpose(1, 0, 2)
        else:
            beta[:, g, :] = fac
        D[g] = np.linalg.lstsq(Phi, Vt[:K].T, rcond=None)[0].T
    D, beta = _orthonormalize(D, beta, basis.gram)

    state_flc = flc_mod.FlcState(mode, D, np.ones((G, K)))
    ssr = stats_.ssr(beta, state_flc)
    sigma2 = np.maximum(ssr / np.maximum(stats_.n_per_outcome, 1), 1e-10)
    for g in range(G):
        for k in range(K):
            ss = float(D[g, k, 2:] @ D[g, k, 2:])
            state_flc.lam[g, k] = (basis.M + 1) / max(ss, 1e-8)
    # constrained posterior means, then a J-orthonormal cleanup
    for _ in range(2):
        for g in range(G):
            for k in range(K):
                prec, lin = flc_mod.conditional_terms(k, g, state_flc, stats_, beta, sigma2)
                others = [j for j in range(K) if j != k]
                L = basis.gram @ state_flc.D[g, others].T if others else None
                d = solve_constrained(GaussianFactor(prec, lin, L))
                s = math.sqrt(float(d @ basis.gram @ d))
                if not s > 1e-10:
                    raise NumericalError(f"initial loading curve {k + 1} has zero norm")
                state_flc.D[g, k] = d / s
                cols = slice(None) if cfg.common_flc else g
                beta[:, cols, k] *= s
        state_flc.D, beta = _orthonormalize(state_flc.D, beta, basis.gram)
    for g in range(G):
        for k in range(K):
            d = state_flc.D[g, k]
            if d[np.argmax(np.abs(d))] < 0:
                state_flc.D[g, k] = -d
                cols = slice(None) if cfg.common_flc else g
                beta[:, cols, k] *= -1.0
            ss = float(state_flc.D[g, k, 2:] @ state_flc.D[g, k, 2:])
            state_flc.lam[g, k] = min(max((basis.M + 1) / max(ss, 1e-12), 2 * flc_mod.LAMBDA_FLOOR), 1e12)
    state_flc.ref = state_flc.D.copy()
    ssr = stats_.ssr(beta, state_flc)
    sigma2 = np.maximum(ssr / np.maximum(stats_.n_per_outcome, 1), 1e-10)

    params = fm.FactorParams.initial(T, C, K, cfg.k_linked, trial_starts(data))
    var0 = np.maximum(np.mean(beta**2, axis=0), 1e-10)  # (C, K)
    innov = np.broadcast_to(var0, (T, C, K)).copy()
    sv = None
    if cfg.sv and cfg.model != "random-walk":
        sv = [[vol.initial_sv_state(math.log(var0[c, k]), T) for k in range(K)] for c in range(C)]
    if cfg.model == "random-walk":
        for k in range(K):
            inc = fm.walk_increments(beta, params.trial_start, k)
            cov = inc.T @ inc / max(inc.shape[0], 1) if inc.size else np.eye(C)
            params.walk_cov[k] = cov + 1e-6 * np.trace(cov) / C * np.eye(C) + 1e-12 * np.eye(C)
    return ModelState(state_flc, beta, sigma2, params, innov, sv, 0)


# ---------------------------------------------------------------------------
# the chain

@dataclass
class Chain:
    config: FitConfig
    basis: SplineBasis
    draws: dict = field(default_factory=dict)  # group -> list of arrays
    iterations: list = field(default_factory=list)
    deviance: list = field(default_factory=list)
    sums: dict = field(default_factory=dict)  # running sums for posterior means
    exceed: dict = field(default_factory=dict)
    n_kept: int = 0
    deviance_at_mean: float | None = None
    final_state: ModelState | None = None
    timings: dict = field(default_factory=dict)
    data_summary: dict = field(default_factory=dict)

    def array(self, group: str) -> np.ndarray:
        return np.asarray(self.draws.get(group, []), dtype=float)

    def mean(self, name: str) -> np.ndarray:
        return self.sums[name] / max(self.n_kept, 1)

    def record(self, state: ModelState, dev: float, resid_z: np.ndarray | None):
        cfg = self.config
        self.iterations.append(state.iteration)
        self.deviance.append(dev)
        values = _monitored_values(state, cfg, resid_z)
        for group in cfg.monitor:
            if group in values:
                self.draws.setdefault(group, []).append(values[group])
        for name, arr in (("beta", state.beta), ("loadings", state.flc.D), ("sigma2", state.sigma2)):
            self.sums[name] = self.sums.get(name, 0.0) + arr
        self.n_kept += 1
        if resid_z is not None:
            z2 = resid_z**2
            df = min(cfg.outlier_df, z2.shape[2])
            self.exceed["single"] = self.exceed.get("single", 0) + (z2 > stats.chi2.ppf(0.95, 1)).astype(np.int64)
            agg = z2[:, :, :df].sum(axis=2)
            self.exceed["aggregate"] = self.exceed.get("aggregate", 0) + (agg > stats.chi2.ppf(0.95, df)).astype(np.int64)

    # -- persistence ---------------------------------------------------------
    def accumulators_json(self) -> dict:
        return {
            "draws": {k: [np.asarray(a).tolist() for a in v] for k, v in self.draws.items()},
            "iterations": list(self.iterations),
            "deviance": list(self.deviance),
            "sums": {k: np.asarray(v).tolist() for k, v in self.sums.items()},
            "exceed": {k: np.asarray(v).tolist() for k, v in self.exceed.items()},
            "n_kept": self.n_kept,
        }

    def load_accumulators(self, raw: dict):
        self.draws = {k: [np.asarray(a, float) for a in v] for k, v in raw["draws"].items()}
        self.iterations = list(raw["iterations"])
        self.deviance = [float(v) for v in raw["deviance"]]
        self.sums = {k: np.asarray(v, float) for k, v in raw["sums"].items()}
        self.exceed = {k: np.asarray(v, np.int64) for k, v in raw["exceed"].items()}
        self.n_kept = int(raw["n_kept"])

    def manifest(self) -> dict:
        return {
            "format": "mfdlm-chain",
            "version": __version__,
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "basis": self.basis.summary(),
            "data": self.data_summary,
            "n_kept": self.n_kept,
            "groups": sorted(self.draws) + ["deviance"],
            "deviance_at_mean": self.deviance_at_mean,
        }

    def write(self, out_dir, timings: bool = False) -> None:
        """Write one CSV per monitored group, posterior means, and the run manifest.

        Wall-clock timings go to ``timings.json`` only when ``timings`` is set,
        so by default every output file depends only on (seed, config, data).
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for group, values in self.draws.items():
            _write_group(out / f"{group}.csv", group, self.iterations, values)
        with open(out / "deviance.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["param", "iteration", "value"])
            for it, val in zip(self.iterations, self.deviance):
                w.writerow(["deviance", it, repr(float(val))])
        means = {name: self.mean(name).tolist() for name in self.sums} if self.n_kept else {}
        means["exceed"] = {k: np.asarray(v).tolist() for k, v in self.exceed.items()}
        means["n_kept"] = self.n_kept
        (out / "posterior_means.json").write_text(json.dumps(means))
        (out / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        if timings:
            (out / "timings.json").write_text(json.dumps(self.timings, indent=2, sort_keys=True))

    @classmethod
    def read(cls, out_dir) -> Chain:
        out = Path(out_dir)
        man = json.loads((out / "manifest.json").read_text())
        cfg = FitConfig.from_dict(man["config"])
        basis = SplineBasis.from_summary(man["basis"])
        chain = cls(cfg, basis)
        chain.data_summary = man.get("data", {})
        chain.deviance_at_mean = man.get("deviance_at_mean")
        for group in man["groups"]:
            if group == "deviance":
                continue
            its, arr = _read_group(out / f"{group}.csv", group)
            chain.draws[group] = list(arr)
            chain.iterations = its
        dev_path = out / "deviance.csv"
        if dev_path.exists():
            with open(dev_path) as fh:
                rows = list(csv.DictReader(fh))
            chain.deviance = [float(r["value"]) for r in rows]
            if not chain.iterations:
                chain.iterations = [int(r["iteration"]) for r in rows]
        means_path = out / "posterior_means.json"
        if means_path.exists():
            means = json.loads(means_path.read_text())
            chain.n_kept = int(means.pop("n_kept"))
            chain.exceed = {k: np.asarray(v) for k, v in means.pop("exceed", {}).items()}
            chain.sums = {k: np.asarray(v) * chain.n_kept for k, v in means.items()}
        return chain


_DIMS = {
    "loadings": ("g", "k", "j"), "lambda": ("g", "k"), "gamma": ("c", "k"), "psi": ("c", "k"),
    "sigma2": ("c",), "beta": ("t", "c", "k"), "q01": ("c", "k"), "q10": ("c", "k"),
    "states": ("t", "c", "k"), "xi0": ("c", "k"), "xi1": ("c", "k"), "sigma_h2": ("c", "k"),
    "innovation_var": ("t", "c", "k"), "walk_cov": ("k", "c", "c2"), "residuals": ("t", "c", "k"),
}


# groups stored without outcome 1 (which has no slope or switching state)
_OFFSETS = {"gamma": (1, 0), "q01": (1, 0), "q10": (1, 0), "states": (0, 1, 0)}


def group_dims(group: str) -> tuple[str, ...]:
    return _DIMS[group]


def group_offsets(group: str) -> tuple[int, ...]:
    """Index offsets of a stored group relative to (t, c, k) numbering."""
    return _OFFSETS.get(group, (0,) * len(_DIMS[group]))


def _write_group(path, group, iterations, values):
    dims = _DIMS[group]
    off = np.asarray(group_offsets(group)) + 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", *dims, "iteration", "value"])
        for it, arr in zip(iterations, values):
            arr = np.asarray(arr, dtype=float)
            for idx in np.ndindex(arr.shape):
                w.writerow([group, *(int(i) for i in np.asarray(idx) + off), it, repr(float(arr[idx]))])


def _read_group(path, group):
    dims = _DIMS[group]
    off = np.asarray(group_offsets(group)) + 1
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return [], np.zeros((0,))
    its = sorted({int(r["iteration"]) for r in rows})
    pos = {it: i for i, it in enumerate(its)}
    shape = tuple(max(int(r[d]) for r in rows) - o + 1 for d, o in zip(dims, off))
    arr = np.zeros((len(its), *shape))
    for r in rows:
        arr[(pos[int(r["iteration"])], *(int(r[d]) - o for d, o in zip(dims, off)))] = float(r["value"])
    return its, arr


def _monitored_values(state: ModelState, cfg: FitConfig, resid_z):
    p = state.params
    C, K = p.gamma.shape
    out = {
        "loadings": state.flc.D.copy(),
        "lambda": state.flc.lam.copy(),
        "sigma2": state.sigma2.copy(),
        "beta": state.beta.copy(),
        "innovation_var": state.innov_var.copy(),
    }
    if cfg.model != "random-walk":
        out["gamma"] = p.gamma[1:, : cfg.k_linked].copy() if C > 1 else np.zeros((0, cfg.k_linked))
        out["psi"] = p.psi.copy()
        if resid_z is not None:
            out["residuals"] = resid_z.copy()
    else:
        out["walk_cov"] = p.walk_cov.copy()
    if cfg.model == "common-trend-hmm" and C > 1:
        out["q01"] = p.q01[1:, : cfg.k_linked].copy()
        out["q10"] = p.q10[1:, : cfg.k_linked].copy()
        out["states"] = p.s[:, 1:, : cfg.k_linked].astype(float)
    if state.sv is not None:
        out["xi0"] = np.array([[s.xi0 for s in row] for row in state.sv])
        out["xi1"] = np.array([[s.xi1 for s in row] for row in state.sv])
        out["sigma_h2"] = np.array([[s.sigma_h2 for s in row] for row in state.sv])
    return out


# ---------------------------------------------------------------------------
# one iteration

def _apply_permutation(state: ModelState, perm: np.ndarray) -> None:
    C = state.beta.shape[1]
    rows = [perm[0]] * C if state.flc.mode == "common" else list(perm)
    p = state.params
    for c, pc in enumerate(rows):
        state.beta[:, c, :] = state.beta[:, c, pc]
        state.innov_var[:, c, :] = state.innov_var[:, c, pc]
        p.gamma[c] = p.gamma[c, pc]
        p.psi[c] = p.psi[c, pc]
        p.s[:, c, :] = p.s[:, c, pc]
        p.q01[c] = p.q01[c, pc]
        p.q10[c] = p.q10[c, pc]
        if state.sv is not None:
            state.sv[c] = [state.sv[c][j] for j in pc]
    if state.flc.mode == "common" and p.walk_cov is not None:
        p.walk_cov = p.walk_cov[perm[0]]
    p.reset_unlinked()


def _update_factor_params(state: ModelState, cfg: FitConfig, it: int, seed: int) -> None:
    p = state.params
    beta = state.beta
    T, C, K = beta.shape
    hmm = cfg.model == "common-trend-hmm"
    for k in range(K):
        for c in range(C):
            var = state.innov_var[:, c, k]
            linked = c > 0 and k < cfg.k_linked
            if linked:
                if hmm:
                    rng = stream(seed, "hmm", k, c, it)
                    p.s[:, c, k] = fm.sample_hmm_states(
                        beta[:, c, k], beta[:, 0, k], p.gamma[c, k], p.psi[c, k], var, p.q01[c, k], p.q10[c, k], rng
                    )
                    rng = stream(seed, "q", k, c, it)
                    p.q01[c, k], p.q10[c, k] = fm.sample_transition_probs(
                        p.s[:, c, k], rng, cfg.hmm_prior, current=(p.q01[c, k], p.q10[c, k])
                    )
                rng = stream(seed, "gamma", k, c, it)
                p.gamma[c, k] = fm.sample_gamma(beta[:, c, k], beta[:, 0, k], p.s[:, c, k], p.psi[c, k], var, rng)
            omega = beta[:, c, k] - (p.gamma[c, k] * p.s[:, c, k] * beta[:, 0, k] if linked else 0.0)
            rng = stream(seed, "psi", k, c, it)
            p.psi[c, k] = fm.sample_ar_coeff(omega, var, rng, current=p.psi[c, k])


def _update_variances(state: ModelState, cfg: FitConfig, stats_, it: int, seed: int, ssr: np.ndarray):
    C = state.sigma2.size
    for c in range(C):
        rng = stream(seed, "sigma2", -1, c, it)
        state.sigma2[c] = vol.sample_obs_variance(int(stats_.n_per_outcome[c]), float(ssr[c]), rng, cfg.obs_prior)
    p = state.params
    T, C, K = state.beta.shape
    if cfg.model == "random-walk":
        for k in range(K):
            rng = stream(seed, "walk", k, -1, it)
            p.walk_cov[k] = vol.sample_walk_covariance(fm.walk_increments(state.beta, p.trial_start, k), rng, cfg.walk_rho)
        return None
    omega = fm.ar_errors(state.beta, p)
    w = fm.standardized_innovations(omega, p.psi)
    for c in range(C):
        for k in range(K):
            rng = stream(seed, "sv", k, c, it)
            if state.sv is not None:
                st = vol.sample_sv_path(w[:, c, k], state.sv[c][k], rng)
                state.sv[c][k] = st
                state.innov_var[:, c, k] = np.exp(st.h)
            else:
                state.innov_var[:, c, k] = vol.sample_constant_innovation_var(w[:, c, k], rng)
    return w / np.sqrt(state.innov_var)


def gibbs_step(state: ModelState, cfg: FitConfig, basis, stats_, seed: int, timings: dict | None = None):
    """Advance ``state`` by one iteration in place; returns (deviance, standardized residuals)."""
    it = state.iteration + 1
    timings = {} if timings is None else timings
    t0 = time.perf_counter()
    block = "flc"
    try:
        perm = flc_mod.sweep(state.flc, stats_, state.beta, state.sigma2, basis, stream(seed, "flc", -1, -1, it), it)
        if perm is not None:
            _apply_permutation(state, perm)
        t1 = time.perf_counter()
        block = "factors"
        G, W = fm.assemble_state_space(cfg.model, state.params, state.innov_var)
        row_ptr, Z, y, v = ssm.collapse_observations(stats_, state.flc, state.sigma2)
        res = ssm.ffbs(ssm.StateSpaceSpec(G, W, row_ptr, Z, y, v), stream(seed, "ffbs", -1, -1, it))
        state.beta = res.draws.reshape(state.beta.shape)
        t2 = time.perf_counter()
        block = "params"
        if cfg.model != "random-walk":
            _update_factor_params(state, cfg, it, seed)
        t3 = time.perf_counter()
        block = "variances"
        ssr = stats_.ssr(state.beta, state.flc)
        resid_z = _update_variances(state, cfg, stats_, it, seed, ssr)
        t4 = time.perf_counter()
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        raise BlockError(block, it, state, exc) from exc
    for name, dt in zip(BLOCKS, (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
        timings[name] = timings.get(name, 0.0) + dt
    state.iteration = it
    n = stats_.n_per_outcome
    dev = float(np.sum(n * np.log(2.0 * math.pi * state.sigma2) + ssr / state.sigma2))
    return dev, resid_z


class BlockError(NumericalError):
    def __init__(self, block, iteration, state, exc):
        super().__init__(f"iteration {iteration}, block '{block}': {exc}")
        self.block, self.iteration, self.state, self.cause = block, iteration, state, exc


def _save_checkpoint(path: Path, state: ModelState, chain: Chain):
    payload = {"version": CHECKPOINT_VERSION, "state": state.to_json(), "chain": chain.accumulators_json()}
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ModelState, dict]:
    raw = json.loads(Path(path).read_text())
    if raw.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {raw.get('version')!r}")
    return ModelState.from_json(raw["state"]), raw["chain"]


def run(data, cfg: FitConfig, out_dir=None, resume=None, basis: SplineBasis | None = None, timings_file: bool = False) -> Chain:
    """Initialize (or resume), iterate, and return the chain; writes outputs when ``out_dir`` is set."""
    if cfg.domain is not None:
        data = data.with_domain(*cfg.domain)
    basis = basis or build_basis(data, cfg)
    stats_ = flc_mod.SufficientStats(data, basis)
    seed = int(cfg.seed)
    chain = Chain(cfg, basis)
    chain.data_summary = {"C": data.C, "T": data.T, "n_obs": data.n_obs, "domain": list(data.domain)}
    if resume is not None:
        state, acc = load_checkpoint(resume)
        chain.load_accumulators(acc)
    else:
        state = initialize(data, cfg, basis, stats_)
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoint.json" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    start = time.perf_counter()
    while state.iteration < cfg.iterations:
        try:
            dev, resid_z = gibbs_step(state, cfg, basis, stats_, seed, timings)
        except BlockError as exc:
            if out is not None:
                dump = {"block": exc.block, "iteration": exc.iteration, "error": str(exc.cause), "state": exc.state.to_json()}
                (out / f"failure_{exc.block}_{exc.iteration}.json").write_text(json.dumps(dump))
            raise
        if state.iteration > cfg.burn_in:
            chain.record(state, dev, resid_z)
        if cfg.progress_every and state.iteration % cfg.progress_every == 0:
            per = ", ".join(f"{k} {v:.2f}s" for k, v in timings.items())
            log.info("iteration %d/%d (%.1fs; %s)", state.iteration, cfg.iterations, time.perf_counter() - start, per)
        if ckpt is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            _save_checkpoint(ckpt, state, chain)
    chain.final_state = state
    chain.timings = {"total_seconds": time.perf_counter() - start, "blocks": timings}
    if chain.n_kept:
        s2 = chain.mean("sigma2")
        mean_flc = flc_mod.FlcState(state.flc.mode, chain.mean("loadings"), state.flc.lam)
        chain.deviance_at_mean = flc_mod.deviance(stats_, chain.mean("beta"), mean_flc, s2)
    if out is not None:
        chain.write(out, timings=timings_file)
    return chain
