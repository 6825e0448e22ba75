"""Equality-constrained Gaussian solves and draws.

A :class:`GaussianFactor` holds a precision ``B^{-1}``, a linear term ``b`` and
an optional constraint matrix ``L``.  The unconstrained solution is ``B b``;
the constrained one is the GLS residual ``B (b - L Lambda)`` with
``Lambda = (L' B L)^{-1} L' B b``.  Everything goes through Cholesky factors
and triangular solves; no inverse is ever formed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import NumericalError

RANK_TOL = 1e-12


@dataclass
class GaussianFactor:
    precision: np.ndarray
    linear: np.ndarray
    constraints: np.ndarray | None = None

    def __post_init__(self):
        self.precision = np.asarray(self.precision, dtype=float)
        self.linear = np.asarray(self.linear, dtype=float)
        n = self.linear.shape[0]
        if self.precision.shape != (n, n):
            raise ValueError(f"precision shape {self.precision.shape} does not match linear term ({n},)")
        if self.constraints is not None:
            L = np.asarray(self.constraints, dtype=float)
            if L.ndim == 1:
                L = L[:, None]
            if L.shape[0] != n:
                raise ValueError(f"constraint matrix has {L.shape[0]} rows, expected {n}")
            self.constraints = L if L.shape[1] else None

    @property
    def n(self) -> int:
        return self.linear.shape[0]

    @property
    def J(self) -> int:
        return 0 if self.constraints is None else self.constraints.shape[1]


def _chol(a: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(0.5 * (a + a.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite") from exc


def _cho_solve(low: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    tmp = sla.solve_triangular(low, rhs, lower=True, check_finite=False)
    return sla.solve_triangular(low.T, tmp, lower=False, check_finite=False)


def _check_rank(L: np.ndarray) -> None:
    # pivoted QR: diag(R) is non-increasing, so compare the last to the first
    r = sla.qr(L, mode="r", pivoting=True, check_finite=False)[0]
    d = np.abs(np.diag(r))
    if d.size == 0 or d[0] == 0.0 or d[-1] <= RANK_TOL * d[0]:
        raise NumericalError(f"constraint matrix is rank deficient (pivots {d!r})")


def _project(low: np.ndarray, L: np.ndarray, x: np.ndarray) -> np.ndarray:
    """x - B L (L' B L)^{-1} L' x, with B = (low low')^{-1}."""
    Lt = _cho_solve(low, L)
    S = L.T @ Lt
    try:
        lowS = np.linalg.cholesky(0.5 * (S + S.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("L' B L is singular; the constraints are rank deficient") from exc
    return x - Lt @ _cho_solve(lowS, L.T @ x)


def solve_unconstrained(g: GaussianFactor) -> np.ndarray:
    low = _chol(g.precision, "precision matrix")
    return _cho_solve(low, g.linear)


def solve_constrained(g: GaussianFactor) -> np.ndarray:
    low = _chol(g.precision, "precision matrix")
    d_hat = _cho_solve(low, g.linear)
    if g.J == 0:
        return d_hat
    _check_rank(g.constraints)
    return _project(low, g.constraints, d_hat)


def sample_constrained(g: GaussianFactor, rng: np.random.Generator, z: np.ndarray | None = None) -> np.ndarray:
    """One draw from N(B~ b, B~) restricted to {d : L' d = 0}.

    ``z`` optionally supplies the standard-normal innovation; a matrix of
    shape (n, N) yields N draws as columns.
    """
    low = _chol(g.precision, "precision matrix")
    if z is None:
        z = rng.standard_normal(g.n)
    # unconstrained draw: B b + low^{-T} z
    tmp = sla.solve_triangular(low, g.linear, lower=True, check_finite=False)
    z = np.asarray(z, dtype=float)
    rhs = tmp + z if z.ndim == 1 else tmp[:, None] + z
    d_u = sla.solve_triangular(low.T, rhs, lower=False, check_finite=False)
    if g.J == 0:
        return d_u
    _check_rank(g.constraints)
    return _project(low, g.constraints, d_u)


def constrained_covariance(g: GaussianFactor) -> np.ndarray:
    """B~ = B - B L (L' B L)^{-1} L' B; for diagnostics and tests only."""
    low = _chol(g.precision, "precision matrix")
    B = _cho_solve(low, np.eye(g.n))
    if g.J == 0:
        return B
    return _project(low, g.constraints, B)
