"""Cubic B-splines, roughness penalty, and the diagonal-penalty (O-spline) basis.

The reparameterized basis is built on the unit interval u = (tau - a)/(b - a)
so that the diffuse prior on the constant and linear coordinates means the
same thing whatever the units of tau.  Gram matrices are reported on the
original tau scale, so ``d' J d`` is the L2 inner product over [a, b].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import DomainError, NumericalError

DEGREE = 3


@dataclass(frozen=True)
class KnotSequence:
    a: float
    b: float
    interior: np.ndarray

    def __post_init__(self):
        interior = np.asarray(self.interior, dtype=float)
        if not self.a < self.b:
            raise ValueError("knot sequence needs a < b")
        if interior.ndim != 1 or interior.size < 1:
            raise ValueError("need at least one interior knot")
        if np.any(np.diff(interior) <= 0):
            raise ValueError("interior knots must be strictly increasing")
        if interior[0] <= self.a or interior[-1] >= self.b:
            raise ValueError("interior knots must lie strictly inside (a, b)")
        interior.setflags(write=False)
        object.__setattr__(self, "interior", interior)

    @property
    def M(self) -> int:
        return int(self.interior.size)

    @property
    def full(self) -> np.ndarray:
        """All M + 8 knots, with the boundary knots repeated four times."""
        return np.r_[[self.a] * (DEGREE + 1), self.interior, [self.b] * (DEGREE + 1)]

    def to_unit(self) -> KnotSequence:
        w = self.b - self.a
        return KnotSequence(0.0, 1.0, (self.interior - self.a) / w)


def place_knots(points, M: int, method: str = "quantile", domain=None) -> KnotSequence:
    """Interior knots at the j/(M+1) quantiles of the distinct points (or equally spaced)."""
    pts = np.unique(np.asarray(points, dtype=float).ravel())
    if M < 1:
        raise ValueError("M must be at least 1")
    if pts.size < M + 2:
        raise ValueError(f"need at least M + 2 = {M + 2} distinct observation points, got {pts.size}")
    a, b = (float(pts[0]), float(pts[-1])) if domain is None else (float(domain[0]), float(domain[1]))
    probs = np.arange(1, M + 1) / (M + 1)
    if method == "quantile":
        interior = np.quantile(pts, probs)
    elif method == "equal":
        interior = a + (b - a) * probs
    else:
        raise ValueError(f"unknown knot placement {method!r}")
    return KnotSequence(a, b, interior)


def _check_domain(x, a, b):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(~np.isfinite(x)) or x.min() < a or x.max() > b:
        bad = x[(x < a) | (x > b) | ~np.isfinite(x)][0]
        raise DomainError(f"tau = {float(bad)!r} outside the spline domain [{a}, {b}]")
    return x


def evaluate_raw(knots: KnotSequence, tau, deriv: int = 0) -> np.ndarray:
    """Cubic B-spline values (or derivatives) at ``tau``; shape (len(tau), M + 4)."""
    x = _check_domain(tau, knots.a, knots.b)
    t = knots.full
    n = t.size - DEGREE - 1
    spl = BSpline(t, np.eye(n), DEGREE, extrapolate=False)
    out = spl(x, nu=deriv)
    return np.nan_to_num(out, copy=False)


def _gauss_nodes(knots: KnotSequence, npts: int):
    nodes, weights = np.polynomial.legendre.leggauss(npts)
    edges = np.r_[knots.a, knots.interior, knots.b]
    lo, hi = edges[:-1, None], edges[1:, None]
    x = 0.5 * (hi - lo) * nodes[None, :] + 0.5 * (hi + lo)
    w = 0.5 * (hi - lo) * weights[None, :]
    x = np.clip(x.ravel(), knots.a, knots.b)
    return x, w.ravel()


def penalty_matrix(knots: KnotSequence) -> np.ndarray:
    """Integrated squared second derivative of the raw basis.

    Second derivatives are piecewise linear, so two Gauss nodes per knot span
    integrate their products exactly.
    """
    x, w = _gauss_nodes(knots, 2)
    B2 = evaluate_raw(knots, x, deriv=2)
    omega = (B2 * w[:, None]).T @ B2
    return 0.5 * (omega + omega.T)


def raw_gram_matrix(knots: KnotSequence) -> np.ndarray:
    x, w = _gauss_nodes(knots, 4)
    B = evaluate_raw(knots, x)
    gram = (B * w[:, None]).T @ B
    return 0.5 * (gram + gram.T)


def greville(knots: KnotSequence) -> np.ndarray:
    t = knots.full
    n = t.size - DEGREE - 1
    return np.array([t[i + 1 : i + DEGREE + 1].mean() for i in range(n)])


def reparameterize(omega: np.ndarray, rank_tol: float = 1e-9):
    """Eigen (SVD) split of the penalty into its M + 2 positive directions.

    Returns ``(U_P, D_P)``: the (M+4, M+2) penalized eigenvectors and their
    positive eigenvalues, largest first.
    """
    omega = np.asarray(omega, dtype=float)
    n = omega.shape[0]
    try:
        vals, vecs = np.linalg.eigh(0.5 * (omega + omega.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition of the penalty failed: {exc}") from exc
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    positive = vals > rank_tol * vals[0]
    npos = int(positive.sum())
    if npos != n - 2:
        raise NumericalError(
            f"penalty rank {npos} != {n - 2} (eigenvalues {vals[-4:]!r}, condition {vals[0] / max(vals[n - 3], 1e-300):.3e})"
        )
    return vecs[:, : n - 2], vals[: n - 2]


class SplineBasis:
    """Reparameterized cubic spline basis phi(tau) = [1, u, B(u) U_P D_P^{-1/2}].

    Attributes
    ----------
    knots : KnotSequence on the original tau scale.
    n : basis dimension M + 4.
    transform : (n, n) matrix with phi(tau)' = B(tau)' transform.
    omega : raw penalty on the unit scale.
    singular_values : the M + 2 positive penalty eigenvalues.
    gram : L2 Gram matrix J of phi over [a, b].
    """

    def __init__(self, knots: KnotSequence):
        self.knots = knots
        self.a, self.b = knots.a, knots.b
        self.width = knots.b - knots.a
        self.unit_knots = knots.to_unit()
        self.n = knots.M + DEGREE + 1
        self.omega = penalty_matrix(self.unit_knots)
        U_P, D_P = reparameterize(self.omega)
        self.singular_values = D_P
        self.transform = np.column_stack(
            [np.ones(self.n), greville(self.unit_knots), U_P / np.sqrt(D_P)[None, :]]
        )
        self.gram = self.width * (self.transform.T @ raw_gram_matrix(self.unit_knots) @ self.transform)
        self.gram = 0.5 * (self.gram + self.gram.T)
        self.penalty_diag = np.r_[0.0, 0.0, np.ones(self.n - 2)]

    @classmethod
    def from_points(cls, points, M: int = 20, domain=None, method: str = "quantile") -> SplineBasis:
        return cls(place_knots(points, M, method=method, domain=domain))

    @property
    def M(self) -> int:
        return self.knots.M

    def to_unit(self, tau):
        return (_check_domain(tau, self.a, self.b) - self.a) / self.width

    def evaluate_raw(self, tau, deriv: int = 0) -> np.ndarray:
        return evaluate_raw(self.knots, tau, deriv)

    def evaluate(self, tau) -> np.ndarray:
        """phi(tau) for each tau; shape (len(tau), n)."""
        u = self.to_unit(tau)
        return evaluate_raw(self.unit_knots, u) @ self.transform

    def penalty(self) -> np.ndarray:
        """Penalty in phi coordinates (diag(0, 0, 1, ..., 1) up to numerics)."""
        return self.transform.T @ self.omega @ self.transform

    def curves(self, D, tau) -> np.ndarray:
        """Evaluate curves with coefficient rows ``D`` at ``tau``; shape (K, len(tau))."""
        return np.atleast_2d(D) @ self.evaluate(tau).T

    def summary(self) -> dict:
        return {
            "a": self.a,
            "b": self.b,
            "M": self.M,
            "interior_knots": [float(v) for v in self.knots.interior],
            "singular_values": [float(v) for v in self.singular_values],
        }

    @classmethod
    def from_summary(cls, raw: dict) -> SplineBasis:
        return cls(KnotSequence(float(raw["a"]), float(raw["b"]), np.asarray(raw["interior_knots"], dtype=float)))


def gram_matrix(basis: SplineBasis) -> np.ndarray:
    return basis.gram.copy()
