"""Empirical measures on the line and Wasserstein-2 distances between them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import ndtri
from scipy.stats import norm

from .errors import DimensionMismatch, EmptyMeasure, GridMismatch, SizeLimit

SMALL_LIMIT = 64


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Uniform-weight empirical measure ``(1/N) sum delta_{atoms}``."""

    atoms: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float).ravel()
        if a.size == 0:
            raise EmptyMeasure("empirical measure needs at least one atom")
        if not np.all(np.isfinite(a)):
            raise ValueError("atoms must be finite")
        object.__setattr__(self, "atoms", a)

    @property
    def N(self) -> int:
        return self.atoms.size

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.N, 1.0 / self.N)

    def mean(self) -> float:
        return float(self.atoms.mean())


@dataclass(frozen=True, eq=False)
class EmpiricalPath:
    """One empirical measure per grid node; ``values`` has shape (K+1, N)."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        g = np.asarray(self.grid, dtype=float)
        if v.ndim != 2 or v.shape[0] != g.size:
            raise DimensionMismatch("values must be (len(grid), N)")
        if v.shape[1] == 0:
            raise EmptyMeasure("paths need at least one particle")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "grid", g)

    @classmethod
    def from_states(cls, grid, states):
        """Build from particle states of shape (N, K+1)."""
        return cls(grid, np.asarray(states).T)

    def __getitem__(self, k) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.values[k])


def _atoms(mu):
    a = mu.atoms if isinstance(mu, EmpiricalMeasure) else np.asarray(mu, dtype=float).ravel()
    if a.size == 0:
        raise EmptyMeasure("empty measure")
    return a


def w2_sorted(x, y, axis=-1):
    """Batched W2 between equal-size samples along ``axis`` via sorting."""
    d = np.sort(x, axis=axis) - np.sort(y, axis=axis)
    return np.sqrt(np.mean(d * d, axis=axis))


def w2_1d(mu, nu) -> float:
    """Exact W2 on the line through the quantile coupling."""
    a, b = np.sort(_atoms(mu)), np.sort(_atoms(nu))
    if a.size == b.size:
        d = a - b
        return float(np.sqrt(np.mean(d * d)))
    # quantile functions are step functions on i/n and j/m; integrate on the union
    cuts = np.union1d(np.arange(a.size + 1) / a.size, np.arange(b.size + 1) / b.size)
    mid = 0.5 * (cuts[1:] + cuts[:-1])
    ia = np.minimum((mid * a.size).astype(int), a.size - 1)
    ib = np.minimum((mid * b.size).astype(int), b.size - 1)
    return float(np.sqrt(np.sum(np.diff(cuts) * (a[ia] - b[ib]) ** 2)))


def w2_exact_small(mu, nu) -> float:
    """W2 via optimal assignment; validation oracle for at most 64 atoms."""
    a, b = _atoms(mu), _atoms(nu)
    if a.size != b.size:
        raise DimensionMismatch("assignment oracle needs equal atom counts")
    if a.size > SMALL_LIMIT:
        raise SizeLimit(f"at most {SMALL_LIMIT} atoms, got {a.size}")
    cost = (a[:, None] - b[None, :]) ** 2
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def sup_path_w2(p: EmpiricalPath, q: EmpiricalPath) -> float:
    if p.values.shape != q.values.shape or not np.allclose(p.grid, q.grid, rtol=0, atol=1e-12):
        raise GridMismatch("paths must share grid and particle count")
    return float(np.max(w2_sorted(p.values, q.values, axis=1)))


def w2_to_gaussian(x, mean, std, axis=-1):
    """W2 between the empirical law of ``x`` (along ``axis``) and N(mean, std^2).

    Closed form: per quantile cell, the Gaussian quantile integrates to
    partial moments of the standard normal.
    """
    xs = np.moveaxis(np.sort(np.asarray(x, dtype=float), axis=axis), axis, -1)
    n = xs.shape[-1]
    z = ndtri(np.arange(n + 1) / n)
    dens = norm.pdf(z)  # zero at both infinite endpoints
    mean = np.asarray(mean, dtype=float)[..., None]
    d = xs - mean
    w2sq = np.mean(d * d, axis=-1) - 2 * std * np.sum(d * (dens[:-1] - dens[1:]), axis=-1) + std**2
    return np.sqrt(np.maximum(w2sq, 0.0))
