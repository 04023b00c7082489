"""Limiting mean field game: affine decoupling field, mean flow, discrete oracle.

For the LQ families the master equation closes on fields of the form
``V(t, x, mu) = p(t) x + r(t) mean(mu) + s(t)``.  Substituting this ansatz
and matching the ``x``, ``mean`` and constant coefficients gives a Riccati
system for ``(p, r, s)``, integrated backward with RK4.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .errors import GridMismatch, RiccatiBlowup, SingularStep
from .grid import HermiteTable, rk4_backward, uniform_grid
from .model import AffineSystem, quadratic

DEFAULT_K = 4000


def _closed_coefficients(system: AffineSystem, p, r, s):
    """Drift and driver along the field, as (cx, cm, c0) affine forms in (x, mean)."""
    bx, by, bm, byb = system.drift
    fx, fy, fm, fyb = system.driver
    drift = (bx + by * p, by * r + bm + byb * (p + r), (by + byb) * s)
    driver = (fx + fy * p, fy * r + fm + fyb * (p + r), (fy + fyb) * s)
    return drift, driver


def coefficient_rhs(system: AffineSystem, p, r, s):
    """Time derivatives (dp, dr, ds) of the field coefficients."""
    (Bx, Bm, B0), (Fx, Fm, F0) = _closed_coefficients(system, p, r, s)
    dp = -(p * Bx + Fx)
    dr = -(p * Bm + Fm + r * (Bx + Bm))
    ds = -(p * B0 + F0 + r * B0)
    return dp, dr, ds


@dataclass(frozen=True, eq=False)
class AffineField:
    """Decoupling field ``V(t,x,mu) = p(t) x + r(t) mean(mu) + s(t)`` on a grid."""

    grid: np.ndarray
    p: np.ndarray
    r: np.ndarray
    s: np.ndarray
    dp: np.ndarray
    dr: np.ndarray
    ds: np.ndarray
    system: AffineSystem
    increments: np.ndarray | None = None  # (K, 3) node-to-node changes of (p, r, s)
    accel: np.ndarray | None = None  # (K+1, 3) second time derivatives

    @property
    def K(self) -> int:
        return len(self.grid) - 1

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    @functools.cached_property
    def _table(self):
        return HermiteTable(self.grid, np.stack([self.p, self.r, self.s], axis=-1),
                            np.stack([self.dp, self.dr, self.ds], axis=-1), self.increments, self.accel)

    def _check(self, t):
        return self._table.check(t)

    def coefficients(self, t):
        """Interpolated (p, r, s) at time(s) t (quintic Hermite, exact at nodes)."""
        v = self._table(t)
        return v[..., 0], v[..., 1], v[..., 2]

    def time_derivative(self, t):
        v = self._table.derivative(t)
        return v[..., 0], v[..., 1], v[..., 2]

    def value(self, t, x, meanX):
        p, r, s = self.coefficients(t)
        return p * x + r * meanX + s

    def drift_coefficients(self, t):
        """(Bx, Bm, B0): decoupled drift ``Bx x + Bm mean + B0``."""
        return _closed_coefficients(self.system, *self.coefficients(t))[0]

    def driver_coefficients(self, t):
        return _closed_coefficients(self.system, *self.coefficients(t))[1]

    def control_coefficients(self, t):
        """(kx, km, k0): feedback control ``kx x + km mean + k0`` along the field."""
        p, r, s = self.coefficients(t)
        cx, cy, cm, cyb = self.system.control
        return cx + cy * p, cy * r + cm + cyb * (p + r), (cy + cyb) * s

    def lipschitz(self) -> tuple[float, float]:
        """Lipschitz constants of V in x and in the mean."""
        return float(np.max(np.abs(self.p))), float(np.max(np.abs(self.r)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "p", "r", "s", "dp", "dr", "ds"])
            for row in zip(self.grid, self.p, self.r, self.s, self.dp, self.dr, self.ds):
                w.writerow([repr(float(v)) for v in row])


def solve_affine_field(system: AffineSystem, K: int = DEFAULT_K) -> AffineField:
    """Backward RK4 for the coefficient ODEs of an affine decoupling field."""
    rhs = lambda z: np.array(coefficient_rhs(system, *z))  # noqa: E731
    terminal = (system.terminal[0], system.terminal[1], 0.0)
    grid, vals, ders, acc, inc = rk4_backward(rhs, terminal, system.T, K)
    return AffineField(grid, *vals.T, *ders.T, system, inc, acc)


def solve_decoupling_field(spec, K: int = DEFAULT_K) -> AffineField:
    return solve_affine_field(quadratic(spec).mfg_system(), K)


@dataclass(frozen=True, eq=False)
class MeanFlow:
    """Mean of the state (``mX``), of the control (``mA``) and state variance."""

    grid: np.ndarray
    mX: np.ndarray
    mA: np.ndarray
    varX: np.ndarray
    dmX: np.ndarray

    @functools.cached_property
    def _spline(self):
        return CubicHermiteSpline(self.grid, self.mX, self.dmX)

    def mean_at(self, t):
        return self._spline(np.asarray(t, dtype=float))


def solve_mean_flow(spec, field: AffineField) -> MeanFlow:
    """RK4 for the mean and variance of the decoupled SDE on the field grid."""
    x0 = field.system.x0
    sig2 = field.system.sigma ** 2
    grid = field.grid
    K = field.K
    h = field.T / K

    # drift coefficients at nodes and midpoints, evaluated in one call
    nodes = field.drift_coefficients(grid)
    mids = field.drift_coefficients(grid[:-1] + 0.5 * h)

    def rhs(c, z):
        bx, bm, b0 = c
        return np.array([(bx + bm) * z[0] + b0, 2 * bx * z[1] + sig2])

    z = np.array([x0, 0.0])
    out = np.empty((2, K + 1))
    out[:, 0] = z
    for k in range(K):
        c0 = [c[k] for c in nodes]
        cm = [c[k] for c in mids]
        c1 = [c[k + 1] for c in nodes]
        k1 = rhs(c0, z)
        k2 = rhs(cm, z + 0.5 * h * k1)
        k3 = rhs(cm, z + 0.5 * h * k2)
        k4 = rhs(c1, z + h * k3)
        z = z + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[:, k + 1] = z
    bx, bm, b0 = field.drift_coefficients(grid)
    kx, km, k0 = field.control_coefficients(grid)
    mX = out[0]
    return MeanFlow(grid, mX, (kx + km) * mX + k0, out[1], (bx + bm) * mX + b0)


def master_pde_residual(spec, field: AffineField, samples) -> np.ndarray:
    """Signed residual of the master equation at samples ``(t, x, meanX)``.

    Each term is evaluated from the model coefficients: ``B`` and ``F`` by
    substituting the optimal control into ``b`` and ``d_x f + d_x b V``.
    """
    q = quadratic(spec)
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    t, x, m = samples[:, 0], samples[:, 1], samples[:, 2]
    p, r, s = field.coefficients(t)
    dp, dr, ds = field.time_derivative(t)
    lx, ly, lm = q.lambda_coefficients()

    def drift_and_driver(z):
        y = p * z + r * m + s
        ybar = (p + r) * m + s
        a = lx * z + ly * y + lm * m
        abar = lx * m + ly * ybar + lm * m
        return q.b(z, a, m, abar), q.f_x(z, a, m, abar) + q.bx * y

    B, F = drift_and_driver(x)
    Bmean, _ = drift_and_driver(m)
    dt_v = dp * x + dr * m + ds
    return dt_v + B * p + F + r * Bmean


def mfe_control(spec, field: AffineField, flow: MeanFlow, t, x):
    """Equilibrium control at state x, time t, against the mean flow."""
    m = flow.mean_at(field._check(t))
    y = field.value(t, x, m)
    lx, ly, lm = quadratic(spec).lambda_coefficients()
    return lx * x + ly * y + lm * m


@dataclass(frozen=True, eq=False)
class DiscreteFbsdeSolution:
    """Exact discrete-time affine representation ``Y_k = P_k X_k + R_k m_k + S_k``."""

    grid: np.ndarray
    P: np.ndarray
    R: np.ndarray
    S: np.ndarray
    mX: np.ndarray
    varX: np.ndarray


def solve_affine_fbsde_oracle(system: AffineSystem, K: int) -> DiscreteFbsdeSolution:
    """Backward recursion for an Euler discretisation of the FBSDE.

    Scheme: ``X_{k+1} = X_k + h B(X_k, Y_k, ...) + sigma dW`` and
    ``Y_k = E_k[Y_{k+1} + h F(X_{k+1}, Y_{k+1}, ...)]``.  The forward step
    couples ``Y_k`` implicitly; the affine ansatz turns the conditional
    expectation into a closed-form update of (P, R, S).  First order in h.
    """
    grid = uniform_grid(system.T, K)
    h = system.T / K
    bx, by, bm, byb = system.drift
    fx, fy, fm, fyb = system.driver
    P = np.empty(K + 1)
    R = np.empty(K + 1)
    S = np.empty(K + 1)
    P[K], R[K], S[K] = system.terminal[0], system.terminal[1], 0.0
    for k in range(K - 1, -1, -1):
        P1, R1, S1 = P[k + 1], R[k + 1], S[k + 1]
        # Y_{k+1} + h F(X_{k+1}, Y_{k+1}, ...) written as an affine map of X_{k+1}
        Ph = P1 + h * (fx + fy * P1)
        Rh = R1 + h * (fy * R1 + fm + fyb * (P1 + R1))
        Sh = S1 + h * (fy + fyb) * S1
        D = 1.0 - h * Ph * by
        if abs(D) < 1e-14:
            raise SingularStep(f"state coefficient denominator vanished at step {k}")
        P[k] = Ph * (1 + h * bx) / D
        cm = h * Ph * bm + Rh * (1 + h * (bx + bm))
        cyb = h * (Ph * byb + Rh * (by + byb))
        E = D - cyb
        if abs(E) < 1e-14:
            raise SingularStep(f"mean coefficient denominator vanished at step {k}")
        R[k] = (cm + cyb * P[k]) / E
        S[k] = Sh / E
    mX = np.empty(K + 1)
    var = np.empty(K + 1)
    mX[0], var[0] = system.x0, 0.0
    for k in range(K):
        ybar = (P[k] + R[k]) * mX[k] + S[k]
        mX[k + 1] = mX[k] + h * ((bx + bm) * mX[k] + (by + byb) * ybar)
        var[k + 1] = (1 + h * (bx + by * P[k])) ** 2 * var[k] + system.sigma**2 * h
    return DiscreteFbsdeSolution(grid, P, R, S, mX, var)


def solve_mkv_fbsde_oracle(spec, K: int) -> DiscreteFbsdeSolution:
    return solve_affine_fbsde_oracle(quadratic(spec).mfg_system(), K)


def largest_safe_horizon(spec_factory, T_max: float = 20.0, K: int = 400, tol: float = 1e-3) -> float:
    """Bisection for the largest T at which the Riccati solve stays bounded.

    ``spec_factory(T)`` must return a spec with horizon T.
    """
    def ok(T):
        try:
            solve_decoupling_field(spec_factory(T), K)
            return True
        except RiccatiBlowup:
            return False

    if ok(T_max):
        return T_max
    lo, hi = 0.0, T_max
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return lo


def check_same_grid(a: np.ndarray, b: np.ndarray) -> None:
    if len(a) != len(b) or not np.allclose(a, b, rtol=0, atol=1e-12):
        raise GridMismatch("time grids differ")
