"""Ragged multivariate functional time series: storage, CSV I/O, simulation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

REQUIRED_COLUMNS = ("outcome", "time", "tau", "y")


@dataclass(frozen=True)
class FunctionalDataset:
    """Observations Y_t^(c)(tau) stored as flat, sorted, read-only arrays.

    ``outcome`` is 0-based internally (1-based in files), ``time`` is the
    1-based integer time index.  Rows are sorted by (outcome, time, tau).
    ``labels`` maps a time index to its free-text label, when one was given.
    """

    outcome: np.ndarray
    time: np.ndarray
    tau: np.ndarray
    y: np.ndarray
    domain: tuple[float, float]
    labels: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        outcome = np.asarray(self.outcome, dtype=np.int64)
        time = np.asarray(self.time, dtype=np.int64)
        tau = np.asarray(self.tau, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if not (outcome.shape == time.shape == tau.shape == y.shape) or outcome.ndim != 1:
            raise DataError("outcome, time, tau and y must be 1-d arrays of equal length")
        if outcome.size == 0:
            raise DataError("dataset is empty")
        a, b = float(self.domain[0]), float(self.domain[1])
        if not a < b:
            raise DataError(f"domain must satisfy a < b, got [{a}, {b}]")
        if tau.min() < a or tau.max() > b:
            raise DataError(f"tau values outside the domain [{a}, {b}]")
        if time.min() < 1:
            raise DataError("time indices start at 1")
        order = np.lexsort((tau, time, outcome))
        outcome, time, tau, y = outcome[order], time[order], tau[order], y[order]
        same = (np.diff(outcome) == 0) & (np.diff(time) == 0)
        if np.any(same & (np.diff(tau) <= 0)):
            i = int(np.flatnonzero(same & (np.diff(tau) <= 0))[0]) + 1
            raise DataError(
                f"duplicate observation point (outcome={outcome[i] + 1}, time={time[i]}, tau={float(tau[i])!r})"
            )
        cs = np.unique(outcome)
        if cs[0] != 0 or cs[-1] != cs.size - 1:
            raise DataError("outcome indices must be contiguous starting at 1")
        for name, arr in (("outcome", outcome), ("time", time), ("tau", tau), ("y", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "domain", (a, b))
        object.__setattr__(self, "labels", dict(self.labels))

    @property
    def C(self) -> int:
        return int(self.outcome.max()) + 1

    @property
    def T(self) -> int:
        return int(self.time.max())

    @property
    def n_obs(self) -> int:
        return int(self.y.size)

    def pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (outcome, time, row_start) for each observed (c, t) group plus a sentinel start."""
        key = self.outcome * (self.T + 1) + self.time
        starts = np.flatnonzero(np.r_[True, np.diff(key) != 0])
        return self.outcome[starts], self.time[starts], np.r_[starts, self.y.size]

    def times(self, c: int) -> np.ndarray:
        """Observed time indices T^(c) for 0-based outcome ``c``."""
        return np.unique(self.time[self.outcome == c])

    def m(self, c: int, t: int) -> int:
        return int(np.count_nonzero((self.outcome == c) & (self.time == t)))

    def group(self, c: int, t: int) -> tuple[np.ndarray, np.ndarray]:
        sel = (self.outcome == c) & (self.time == t)
        return self.tau[sel], self.y[sel]

    def with_domain(self, a: float, b: float) -> FunctionalDataset:
        return FunctionalDataset(self.outcome, self.time, self.tau, self.y, (a, b), self.labels)


def _parse_float(text: str, column: str, line: int) -> float:
    try:
        val = float(text)
    except ValueError:
        raise DataError(f"line {line}: non-numeric {column} value {text!r}") from None
    if not math.isfinite(val):
        raise DataError(f"line {line}: non-finite {column} value {text!r}")
    return val


def _parse_int(text: str, column: str, line: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataError(f"line {line}: non-integer {column} value {text!r}") from None


def load_long_csv(path, domain: Sequence[float] | None = None) -> FunctionalDataset:
    """Read the ``outcome,time,tau,y[,label]`` long format.

    The domain defaults to the pooled range of tau over all outcomes.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    outcome, time, tau, y = [], [], [], []
    labels: dict[int, str] = {}
    seen: dict[tuple[int, int, float], int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        idx = {name: header.index(name) for name in header}
        has_label = "label" in idx
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            c = _parse_int(row[idx["outcome"]], "outcome", line)
            t = _parse_int(row[idx["time"]], "time", line)
            x = _parse_float(row[idx["tau"]], "tau", line)
            val = _parse_float(row[idx["y"]], "y", line)
            if c < 1:
                raise DataError(f"line {line}: outcome indices start at 1")
            if t < 1:
                raise DataError(f"line {line}: time indices start at 1")
            key = (c, t, x)
            if key in seen:
                raise DataError(
                    f"line {line}: duplicate (outcome, time, tau) = ({c}, {t}, {x!r}); first seen on line {seen[key]}"
                )
            seen[key] = line
            outcome.append(c - 1)
            time.append(t)
            tau.append(x)
            y.append(val)
            if has_label and row[idx["label"]].strip():
                labels[t] = row[idx["label"]].strip()
    if not y:
        raise DataError(f"{path}: no data rows")
    tau_arr = np.asarray(tau)
    dom = (float(tau_arr.min()), float(tau_arr.max())) if domain is None else tuple(map(float, domain))
    return FunctionalDataset(np.asarray(outcome), np.asarray(time), tau_arr, np.asarray(y), dom, labels)


def write_long_csv(data: FunctionalDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = list(REQUIRED_COLUMNS) + (["label"] if data.labels else [])
        writer.writerow(header)
        for c, t, x, val in zip(data.outcome, data.time, data.tau, data.y):
            row = [int(c) + 1, int(t), repr(float(x)), repr(float(val))]
            if data.labels:
                row.append(data.labels.get(int(t), ""))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# synthetic data

FACTOR_KINDS = ("common-trend", "random-walk", "independent-ar1")


@dataclass
class SynthSpec:
    """Ground-truth configuration for :func:`generate_synthetic`.

    ``loadings`` are (K, n) coefficient vectors on ``basis``; when omitted a
    smooth orthonormal set is built with :func:`default_loadings`.  ``gamma``
    and ``psi`` are (C, K) arrays (row 0 of ``gamma`` is ignored).
    ``innovation_var`` is the (C, K) variance of the factor innovations.
    Every outcome is observed on ``m`` equally spaced points unless
    ``grids`` supplies one grid per outcome.
    """

    C: int
    K: int
    T: int
    kind: str = "common-trend"
    m: int = 30
    domain: tuple[float, float] = (0.0, 1.0)
    n_knots: int = 20
    gamma: np.ndarray | None = None
    psi: np.ndarray | None = None
    noise_var: np.ndarray | float = 0.01
    innovation_var: np.ndarray | None = None
    loadings: np.ndarray | None = None
    grids: list | None = None
    bins_per_trial: int | None = None
    walk_cov: np.ndarray | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> SynthSpec:
        raw = dict(raw)
        for key in ("gamma", "psi", "innovation_var", "loadings", "walk_cov"):
            if raw.get(key) is not None:
                raw[key] = np.asarray(raw[key], dtype=float)
        if isinstance(raw.get("noise_var"), list):
            raw["noise_var"] = np.asarray(raw["noise_var"], dtype=float)
        if raw.get("domain") is not None:
            raw["domain"] = tuple(float(v) for v in raw["domain"])
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic-spec keys: {sorted(unknown)}")
        return cls(**raw)


def default_loadings(basis, K: int) -> np.ndarray:
    """Smooth orthonormal curves in the span of ``basis``, smoothest first.

    Built by L2 Gram-Schmidt on a ladder of increasingly wiggly targets.
    Every curve carries some curvature so no smoothing parameter is driven to
    the unpenalized limit.
    """
    grid = np.linspace(0.0, 1.0, 401)
    targets = [
        1.0 + 0.6 * np.exp(-3.0 * grid),
        np.cos(np.pi * grid),
        np.cos(2.0 * np.pi * grid),
        np.cos(3.0 * np.pi * grid),
    ]
    j = 4
    while len(targets) < K:
        targets.append(np.cos(j * np.pi * grid))
        j += 1
    tau = basis.a + (basis.b - basis.a) * grid
    Phi = basis.evaluate(tau)
    J = basis.gram
    out = []
    for target in targets[:K]:
        d = np.linalg.lstsq(Phi, target, rcond=None)[0]
        for prev in out:
            d = d - (prev @ J @ d) * prev
        d = d / math.sqrt(d @ J @ d)
        out.append(d)
    D = np.array(out)
    for _ in range(2):  # re-orthogonalize to machine precision
        L = np.linalg.cholesky(D @ J @ D.T)
        D = np.linalg.solve(L, D)
    return D


def _check_orthonormal(D, J, tol=1e-10):
    err = np.max(np.abs(D @ J @ D.T - np.eye(D.shape[0])))
    if err > tol:
        raise ValueError(f"true loading curves are not orthonormal (max error {err:.3e})")


def generate_synthetic(spec: SynthSpec, basis=None):
    """Simulate data from the observation equation plus the chosen factor model.

    Returns ``(dataset, truth)`` where ``truth`` holds beta (T, C, K), the
    loading coefficients, the basis, gamma, psi and the noise variances.
    """
    from .basis import SplineBasis

    if spec.kind not in FACTOR_KINDS:
        raise ValueError(f"unknown factor kind {spec.kind!r}; expected one of {FACTOR_KINDS}")
    C, K, T = spec.C, spec.K, spec.T
    rng = np.random.default_rng(spec.seed)
    a, b = spec.domain
    grids = spec.grids
    if grids is None:
        grids = [np.linspace(a, b, spec.m)] * C
    grids = [np.asarray(g, dtype=float) for g in grids]
    if basis is None:
        pooled = np.concatenate(grids)
        basis = SplineBasis.from_points(pooled, spec.n_knots, domain=(a, b))
    D = default_loadings(basis, K) if spec.loadings is None else np.asarray(spec.loadings, dtype=float)
    if D.shape != (K, basis.n):
        raise ValueError(f"loadings must have shape ({K}, {basis.n})")
    _check_orthonormal(D, basis.gram)

    gamma = np.zeros((C, K)) if spec.gamma is None else np.asarray(spec.gamma, dtype=float).reshape(C, K)
    psi = np.zeros((C, K)) if spec.psi is None else np.asarray(spec.psi, dtype=float).reshape(C, K)
    if spec.innovation_var is None:
        innov = np.tile(1.0 / (1.0 + np.arange(K)), (C, 1))
    else:
        innov = np.asarray(spec.innovation_var, dtype=float).reshape(C, K)
    noise = np.broadcast_to(np.asarray(spec.noise_var, dtype=float), (C,)).copy()

    beta = np.zeros((T, C, K))
    if spec.kind == "random-walk":
        per = spec.bins_per_trial or T
        if T % per:
            raise ValueError("T must be a multiple of bins_per_trial")
        Wc = spec.walk_cov
        if Wc is None:
            Wc = np.stack([np.eye(C) * innov[:, k] for k in range(K)])
        Wc = np.asarray(Wc, dtype=float).reshape(K, C, C)
        chol = np.linalg.cholesky(Wc)
        for t in range(T):
            shock = np.einsum("kij,kj->ki", chol, rng.standard_normal((K, C))).T
            if t % per == 0:
                beta[t] = shock
            else:
                beta[t] = beta[t - 1] + shock
    else:
        omega = np.zeros((T, C, K))
        sd = np.sqrt(innov)
        z = rng.standard_normal((T, C, K))
        if np.any(np.abs(psi) >= 1):
            raise ValueError("psi must lie in (-1, 1)")
        omega[0] = sd * z[0] / np.sqrt(1.0 - psi**2)
        for t in range(1, T):
            omega[t] = psi * omega[t - 1] + sd * z[t]
        beta = omega.copy()
        if spec.kind == "common-trend":
            beta[:, 1:, :] += gamma[None, 1:, :] * beta[:, :1, :]

    outcome, time, tau, y = [], [], [], []
    for c in range(C):
        Phi = basis.evaluate(grids[c])
        F = Phi @ D.T  # (m, K)
        mean = beta[:, c, :] @ F.T  # (T, m)
        eps = rng.standard_normal(mean.shape) * math.sqrt(noise[c])
        vals = mean + eps
        m = grids[c].size
        outcome.append(np.full(T * m, c))
        time.append(np.repeat(np.arange(1, T + 1), m))
        tau.append(np.tile(grids[c], T))
        y.append(vals.ravel())
    labels = {}
    if spec.kind == "random-walk" and spec.bins_per_trial:
        per = spec.bins_per_trial
        labels = {t + 1: f"1:{t // per + 1}:{t % per + 1}" for t in range(T)}
    data = FunctionalDataset(
        np.concatenate(outcome), np.concatenate(time), np.concatenate(tau), np.concatenate(y), (a, b), labels
    )
    truth = {
        "beta": beta,
        "loadings": D,
        "basis": basis,
        "gamma": gamma,
        "psi": psi,
        "noise_var": noise,
        "innovation_var": innov,
        "kind": spec.kind,
    }
    return data, truth
