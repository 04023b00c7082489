"""Uniform time grids, backward RK4 and Hermite tables on them."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import FieldDomainError, RiccatiBlowup, SpecError

BLOWUP = 1e12


def uniform_grid(T: float, K: int) -> np.ndarray:
    if int(K) != K or K < 2:
        raise SpecError(f"grid size K must be an integer >= 2, got {K}")
    return np.linspace(0.0, T, int(K) + 1)


def rk4_backward(rhs: Callable, terminal, T: float, K: int):
    """Integrate ``y' = rhs(y)`` from ``y(T) = terminal`` back to 0.

    Returns node values ``(K+1, n)``, node first and second derivatives
    and the per-step increments ``y_{k+1} - y_k`` (kept to avoid
    cancellation later).  Raises RiccatiBlowup when a component exceeds
    ``BLOWUP``.
    """
    grid = uniform_grid(T, K)
    h = T / K
    y = np.asarray(terminal, dtype=float)
    vals = np.empty((K + 1, y.size))
    inc = np.empty((K, y.size))
    vals[K] = y
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K, 0, -1):
            k1 = rhs(y)
            k2 = rhs(y - 0.5 * h * k1)
            k3 = rhs(y - 0.5 * h * k2)
            k4 = rhs(y - h * k3)
            inc[k - 1] = h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            y = y - inc[k - 1]
            big = np.max(np.abs(y))
            if not np.isfinite(big) or big > BLOWUP:
                raise RiccatiBlowup(grid[k - 1], big)
            vals[k - 1] = y
    ders = np.array([rhs(v) for v in vals])
    acc = np.array([second_derivative(rhs, v, d) for v, d in zip(vals, ders)])
    return grid, vals, ders, acc, inc


def second_derivative(rhs: Callable, y, dy):
    """``y'' = J(y) y'`` by a central difference along ``y'``.

    Exact up to rounding when ``rhs`` is at most quadratic (every Riccati
    system here); second order in the step otherwise.
    """
    scale = np.max(np.abs(dy))
    if scale == 0.0:
        return np.zeros_like(dy)
    eps = (1.0 + np.max(np.abs(y))) / scale
    return (np.asarray(rhs(y + eps * dy)) - np.asarray(rhs(y - eps * dy))) / (2 * eps)


class HermiteTable:
    """Piecewise Hermite interpolant through node values and derivatives.

    Quintic (C2) when node second derivatives ``acc`` are given, cubic
    otherwise.  Written on node increments so the time derivative does not
    difference nearly equal node values.
    """

    def __init__(self, grid, vals, ders, inc=None, acc=None):
        self.grid = np.asarray(grid, dtype=float)
        self.vals = np.asarray(vals, dtype=float).reshape(len(self.grid), -1)
        self.ders = np.asarray(ders, dtype=float).reshape(self.vals.shape)
        self.inc = np.diff(self.vals, axis=0) if inc is None else np.asarray(inc).reshape(-1, self.vals.shape[1])
        self.acc = None if acc is None else np.asarray(acc, dtype=float).reshape(self.vals.shape)
        self.T = float(self.grid[-1])
        self.K = len(self.grid) - 1

    def check(self, t):
        t = np.asarray(t, dtype=float)
        tol = 1e-12 * max(1.0, self.T)
        if not np.all(np.isfinite(t)) or np.any(t < -tol) or np.any(t > self.T + tol):
            raise FieldDomainError(f"time outside field grid [0, {self.T}]")
        return np.clip(t, 0.0, self.T)

    def _locate(self, t):
        t = self.check(t)
        h = self.T / self.K
        k = np.minimum((t / h).astype(int), self.K - 1)
        th = ((t - self.grid[k]) / h)[..., None]
        return k, th, h

    def __call__(self, t):
        k, s, h = self._locate(t)
        if self.acc is None:
            return (self.vals[k] + (3 * s**2 - 2 * s**3) * self.inc[k]
                    + h * ((s**3 - 2 * s**2 + s) * self.ders[k] + (s**3 - s**2) * self.ders[k + 1]))
        s2, s3 = s * s, s**3
        return (self.vals[k] + s3 * (10 - 15 * s + 6 * s2) * self.inc[k]
                + h * (s * (1 - 6 * s2 + 8 * s3 - 3 * s2 * s2) * self.ders[k]
                       + s3 * (-4 + 7 * s - 3 * s2) * self.ders[k + 1])
                + h * h * (0.5 * s2 * (1 - s) ** 3 * self.acc[k] + 0.5 * s3 * (1 - s) ** 2 * self.acc[k + 1]))

    def derivative(self, t):
        k, s, h = self._locate(t)
        if self.acc is None:
            return ((6 * s - 6 * s**2) * self.inc[k] / h
                    + (3 * s**2 - 4 * s + 1) * self.ders[k] + (3 * s**2 - 2 * s) * self.ders[k + 1])
        s2 = s * s
        return (30 * s2 * (1 - s) ** 2 * self.inc[k] / h
                + (1 - 18 * s2 + 32 * s2 * s - 15 * s2 * s2) * self.ders[k]
                + s2 * (-12 + 28 * s - 15 * s2) * self.ders[k + 1]
                + h * (0.5 * s * (1 - s) ** 2 * (2 - 5 * s) * self.acc[k]
                       + 0.5 * s2 * (1 - s) * (3 - 5 * s) * self.acc[k + 1]))
