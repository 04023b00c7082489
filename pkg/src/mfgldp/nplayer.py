"""Open-loop N-player Nash system for LQ games.

Exchangeability reduces the adjoint processes to

    Y^{ii} = a X^i + b xbar + e,
    Y^{ij} = (c X^i + c' X^j + f xbar + g) / N     (j != i),

with seven scalar coefficient ODEs independent of N in size.  Two checks
guard the reduction: a pointwise comparison of the ansatz dynamics with
``-d_{x^j} H^{N,i}`` computed directly, and a brute-force discrete backward
recursion on full affine maps for small N.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass

import numpy as np

from .errors import AnsatzMismatch, DimensionMismatch, NonConvexHamiltonian, SpecError
from .grid import HermiteTable, rk4_backward, uniform_grid
from .model import QuadraticGame, quadratic

NAMES = ("a", "b", "e", "c", "cp", "f", "g")


def _feedback(q: QuadraticGame, N: int, a, b, e, c, cp, f, g):
    """Nash feedback ``A1 X^i + A2 xbar + A0`` and helpers, from the ansatz.

    Solves the first-order condition in the own control, including the
    1/N terms through the control mean (the correction called zeta).
    """
    if q.faa <= 0:
        raise NonConvexHamiltonian("control weight must be positive")
    s1 = a + (N - 1) * c / N - cp / N
    s2 = b + (N - 1) * f / N + cp
    s0 = e + (N - 1) * g / N
    k1 = -(q.fxa + q.ba * a + (q.fxn + q.bn * s1) / N) / q.faa
    k2 = -(q.fam + q.ba * b + (q.fmn + q.bn * s2) / N) / q.faa
    k0 = -(q.ba * e + q.bn * s0 / N) / q.faa
    kn = -q.fnn / (N * q.faa)
    A1 = k1
    A2 = k2 + kn * (k1 + k2) / (1 - kn)
    A0 = k0 / (1 - kn)
    return (A1, A2, A0), (s1, s2, s0)


def nash_rhs(q: QuadraticGame, N: int, y):
    a, b, e, c, cp, f, g = y
    (A1, A2, A0), (s1, s2, s0) = _feedback(q, N, *y)
    D1 = q.bx + q.ba * A1
    D2 = q.ba * A2 + q.bm + q.bn * (A1 + A2)
    D0 = (q.ba + q.bn) * A0
    # d_x f and d_mu f along the feedback, as (X^i, xbar, 1) coefficients
    fx = (q.fxx + q.fxa * A1, q.fxa * A2 + q.fxm + q.fxn * (A1 + A2), (q.fxa + q.fxn) * A0)
    fm = (q.fxm + q.fam * A1, q.fmm + q.fam * A2 + q.fmn * (A1 + A2), (q.fam + q.fmn) * A0)
    rX = fx[0] + fm[0] / N + q.bx * a + q.bm * s1 / N
    rM = fx[1] + fm[1] / N + q.bx * b + q.bm * s2 / N
    r1 = fx[2] + fm[2] / N + q.bx * e + q.bm * s0 / N
    return np.array([
        -(a * D1 + rX),
        -(a * D2 + b * (D1 + D2) + rM),
        -((a + b) * D0 + r1),
        -(c * D1 + fm[0] + q.bx * c + q.bm * s1),
        -(cp * D1 + q.bx * cp),
        -((c + cp) * D2 + f * (D1 + D2) + fm[1] + q.bx * f + q.bm * s2),
        -((c + cp + f) * D0 + fm[2] + q.bx * g + q.bm * s0),
    ])


@dataclass(frozen=True, eq=False)
class NPlayerField:
    """Exchangeable adjoint representation on a grid; ``coef`` is (K+1, 7)."""

    N: int
    grid: np.ndarray
    coef: np.ndarray
    dcoef: np.ndarray
    game: QuadraticGame
    increments: np.ndarray | None = None
    accel: np.ndarray | None = None

    @functools.cached_property
    def _table(self):
        return HermiteTable(self.grid, self.coef, self.dcoef, self.increments, self.accel)

    def coefficients(self, t) -> dict:
        v = self._table(t)
        return {n: v[..., i] for i, n in enumerate(NAMES)}

    def feedback_coefficients(self, t):
        v = self._table(t)
        return _feedback(self.game, self.N, *np.moveaxis(v, -1, 0))[0]

    def row_sum_coefficients(self, t):
        """(s1, s2, s0) with ``sum_j Y^{ij} = s1 X^i + s2 xbar + s0``."""
        v = self._table(t)
        return _feedback(self.game, self.N, *np.moveaxis(v, -1, 0))[1]

    def adjoint_matrix(self, t: float, X) -> np.ndarray:
        """Full ``Y^{ij}`` for states ``X`` of shape (N,)."""
        c = self.coefficients(t)
        X = np.asarray(X, dtype=float)
        xbar = X.mean()
        Y = (c["c"] * X[:, None] + c["cp"] * X[None, :] + c["f"] * xbar + c["g"]) / self.N
        np.fill_diagonal(Y, c["a"] * X + c["b"] * xbar + c["e"])
        return Y

    def affine_maps(self, t: float):
        """Ansatz written as full affine maps ``Y^{ij} = M[i,j,:] . X + n[i,j]``."""
        c = self.coefficients(t)
        N = self.N
        eye = np.eye(N)
        M = np.empty((N, N, N))
        n = np.empty((N, N))
        for i in range(N):
            for j in range(N):
                if i == j:
                    M[i, j] = c["a"] * eye[i] + c["b"] / N
                    n[i, j] = c["e"]
                else:
                    M[i, j] = (c["c"] * eye[i] + c["cp"] * eye[j] + c["f"] / N) / N
                    n[i, j] = c["g"] / N
        return M, n


def _terminal(q: QuadraticGame, N: int):
    return (q.gxx + q.gxm / N, q.gxm + q.gmm / N, 0.0, q.gxm, 0.0, q.gmm, 0.0)


def solve_nplayer_nash(spec, N: int, K: int = 2000, check_nodes: int = 5, seed: int = 0) -> NPlayerField:
    """RK4 for the exchangeable Nash coefficients, then a derivation check."""
    if N < 2:
        raise SpecError("N-player solver needs N >= 2")
    q = quadratic(spec)
    grid, vals, ders, acc, inc = rk4_backward(lambda y: nash_rhs(q, N, y), _terminal(q, N), q.T, K)
    field = NPlayerField(int(N), grid, vals, ders, q, inc, acc)
    if check_nodes:
        check_ansatz(field, nodes=check_nodes, seed=seed)
    return field


def hamiltonian_gradient(q: QuadraticGame, X, alpha, Y) -> np.ndarray:
    """``d_{x^j} H^{N,i}`` for every (i, j), evaluated directly."""
    N = X.size
    xbar, abar = X.mean(), alpha.mean()
    fx = q.f_x(X, alpha, xbar, abar)
    fm = q.f_m(X, alpha, xbar, abar)
    G = q.bx * Y + (fm[:, None] + q.bm * Y.sum(axis=1, keepdims=True)) / N
    G[np.diag_indices(N)] += fx
    return G


def control_gradient(q: QuadraticGame, X, alpha, Y) -> np.ndarray:
    """``d_{alpha^i} H^{N,i}`` for every i (open-loop first-order condition)."""
    N = X.size
    xbar, abar = X.mean(), alpha.mean()
    return (q.f_a(X, alpha, xbar, abar) + q.f_n(X, alpha, xbar, abar) / N
            + q.ba * np.diag(Y) + q.bn * Y.sum(axis=1) / N)


def nash_controls(q: QuadraticGame, X, Y) -> np.ndarray:
    """Solve the N coupled first-order conditions for the controls."""
    N = X.size
    xbar = X.mean()
    lhs = q.faa * np.eye(N) + q.fnn / N**2 * np.ones((N, N))
    rhs = -(q.fxa * X + q.fam * xbar + (q.fxn * X + q.fmn * xbar) / N
            + q.ba * np.diag(Y) + q.bn * Y.sum(axis=1) / N)
    return np.linalg.solve(lhs, rhs)


def check_ansatz(field: NPlayerField, nodes: int = 5, seed: int = 0, tol: float = 1e-9) -> float:
    """Compare ansatz dynamics with ``-d_{x^j} H^{N,i}`` at random states."""
    q, N = field.game, field.N
    rng = np.random.default_rng(seed)
    worst = 0.0
    # grid nodes, where derivatives are exact, so interpolation error is not counted
    for k in np.linspace(0, field.grid.size - 1, nodes).round().astype(int):
        t = field.grid[k]
        X = rng.normal(size=N)
        Y = field.adjoint_matrix(t, X)
        alpha = nash_controls(q, X, Y)
        A1, A2, A0 = field.feedback_coefficients(t)
        xbar = X.mean()
        ctrl_err = np.max(np.abs(alpha - (A1 * X + A2 * xbar + A0)))
        dX = q.b(X, alpha, xbar, alpha.mean())
        dc = dict(zip(NAMES, field._table.derivative(t)))
        c = field.coefficients(t)
        dxbar = dX.mean()
        lhs = (dc["c"] * X[:, None] + dc["cp"] * X[None, :] + dc["f"] * xbar + dc["g"]
               + c["c"] * dX[:, None] + c["cp"] * dX[None, :] + c["f"] * dxbar) / N
        diag = (dc["a"] * X + dc["b"] * xbar + dc["e"] + c["a"] * dX + c["b"] * dxbar)
        lhs[np.diag_indices(N)] = diag
        rhs = -hamiltonian_gradient(q, X, alpha, Y)
        scale = 1.0 + np.max(np.abs(rhs))
        err = max(np.max(np.abs(lhs - rhs)) / scale, ctrl_err / (1.0 + np.max(np.abs(alpha))))
        worst = max(worst, err)
    if worst > tol:
        raise AnsatzMismatch(f"ansatz leaves remainder {worst:.3e}")
    return worst


@dataclass(frozen=True, eq=False)
class DiscreteNashMaps:
    """Full affine maps ``Y^{ij}_k = M[k,i,j,:] . X_k + n[k,i,j]``."""

    grid: np.ndarray
    M: np.ndarray
    n: np.ndarray


def brute_force_discrete_nash(spec, N: int, K: int) -> DiscreteNashMaps:
    """Backward recursion for an Euler discretisation of the Nash adjoint system.

    No symmetry is imposed.  At step k the controls solve the first-order
    conditions against the predictor ``Y_{k+1}``-maps evaluated at ``X_k``;
    ``Y_k = E_k[Y_{k+1}] + h d_{x^j} H^{N,i}(X_k, alpha_k, predictor)``.
    """
    if not 1 <= N <= 5:
        raise SpecError("brute-force oracle supports 1 <= N <= 5")
    if K > 10**4:
        raise SpecError("brute-force oracle supports K <= 1e4")
    q = quadratic(spec)
    grid = uniform_grid(q.T, K)
    h = q.T / K
    I = np.eye(N)
    avg = np.full(N, 1.0 / N)
    M = np.empty((K + 1, N, N, N))
    n = np.zeros((K + 1, N, N))
    # terminal: d_{x^j} g(X^i, xbar) = delta_ij (gxx X^i + gxm xbar) + (gxm X^i + gmm xbar)/N
    for i in range(N):
        for j in range(N):
            M[K, i, j] = (I[i] * q.gxx + avg * q.gxm) * (i == j) + (q.gxm * I[i] + q.gmm * avg) / N
    lhs_inv = np.linalg.inv(q.faa * I + q.fnn / N**2 * np.ones((N, N)))
    for k in range(K - 1, -1, -1):
        M1, n1 = M[k + 1], n[k + 1]
        # affine forms in X: value = L @ X + l0, L has shape (..., N)
        Ydiag_L = M1[np.arange(N), np.arange(N)]          # (N, N)
        Ydiag_0 = n1[np.arange(N), np.arange(N)]
        S_L, S_0 = M1.sum(axis=1), n1.sum(axis=1)
        xbar_L = avg
        rhs_L = -(q.fxa * I + q.fam * xbar_L + (q.fxn * I + q.fmn * xbar_L) / N + q.ba * Ydiag_L + q.bn * S_L / N)
        rhs_0 = -(q.ba * Ydiag_0 + q.bn * S_0 / N)
        a_L, a_0 = lhs_inv @ rhs_L, lhs_inv @ rhs_0
        abar_L, abar_0 = a_L.mean(axis=0), a_0.mean()
        # E_k X_{k+1} = G X + g0
        G = I + h * (q.bx * I + q.ba * a_L + q.bm * xbar_L + q.bn * abar_L)
        g0 = h * (q.ba * a_0 + q.bn * abar_0)
        # d_x f(i) and d_mu f(i) as affine forms (N, N) + (N,)
        fx_L = q.fxx * I + q.fxa * a_L + q.fxm * xbar_L + q.fxn * abar_L
        fx_0 = q.fxa * a_0 + q.fxn * abar_0
        fm_L = q.fxm * I + q.fmm * xbar_L + q.fam * a_L + q.fmn * abar_L
        fm_0 = q.fam * a_0 + q.fmn * abar_0
        grad_L = q.bx * M1 + ((fm_L + q.bm * S_L) / N)[:, None, :]
        grad_0 = q.bx * n1 + ((fm_0 + q.bm * S_0) / N)[:, None]
        grad_L[np.arange(N), np.arange(N)] += fx_L
        grad_0[np.arange(N), np.arange(N)] += fx_0
        M[k] = M1 @ G + h * grad_L
        n[k] = M1 @ g0 + n1 + h * grad_0
    return DiscreteNashMaps(grid, M, n)


def compare_with_brute_force(field: NPlayerField, maps: DiscreteNashMaps) -> float:
    """Sup over nodes and entries of the map difference (grids must match)."""
    if len(field.grid) != len(maps.grid):
        raise DimensionMismatch("field and oracle grids differ")
    worst = 0.0
    for k, t in enumerate(maps.grid):
        M, n = field.affine_maps(t)
        worst = max(worst, np.max(np.abs(M - maps.M[k])), np.max(np.abs(n - maps.n[k])))
    return float(worst)


@dataclass(frozen=True, eq=False)
class ResidualDiagnostics:
    """Residuals along simulated paths: eps, zeta ``(..., N, K+1)``, gamma ``(..., N)``."""

    N: int
    eps: np.ndarray
    zeta: np.ndarray
    gamma: np.ndarray

    @property
    def max_eps(self):
        return np.max(np.abs(self.eps), axis=(-2, -1))

    @property
    def max_zeta(self):
        return np.max(np.abs(self.zeta), axis=(-2, -1))

    @property
    def max_gamma(self):
        return np.max(np.abs(self.gamma), axis=-1)

    @property
    def total(self):
        """``max_i (sup_t |eps^i| + sup_t |zeta^i| + |gamma^i|)`` per replication."""
        per = np.max(np.abs(self.eps), axis=-1) + np.max(np.abs(self.zeta), axis=-1) + np.abs(self.gamma)
        return np.max(per, axis=-1)


def compute_residuals(spec, field: NPlayerField, ensemble) -> ResidualDiagnostics:
    """Evaluate the residual processes pathwise from the model derivatives."""
    from .model import derivatives

    if ensemble.N != field.N:
        raise DimensionMismatch(f"ensemble has N={ensemble.N}, field has N={field.N}")
    q = quadratic(spec)
    d = derivatives(spec)
    N = field.N
    X, A = ensemble.states, ensemble.controls
    grid = ensemble.grid
    c = field.coefficients(grid)
    s1, s2, s0 = field.row_sum_coefficients(grid)
    xbar = X.mean(axis=-2, keepdims=True)
    abar = A.mean(axis=-2, keepdims=True)
    S = s1 * X + s2 * xbar + s0
    eps = (d.dmuf(X, A, xbar, abar, X) + d.dmub(X, A, xbar, abar, X) * S) / N
    zeta = -(d.dnuf(X, A, xbar, abar, A) + q.bn * S) / N
    gamma = d.dmug(X[..., -1], xbar[..., -1], X[..., -1]) / N
    return ResidualDiagnostics(N, eps, zeta, gamma)


def foc_residual(spec, field: NPlayerField, ensemble) -> np.ndarray:
    """``d_{alpha^i} H^{N,i}`` along simulated paths (zero at a Nash point)."""
    q = quadratic(spec)
    X, A = ensemble.states, ensemble.controls
    c = field.coefficients(ensemble.grid)
    s1, s2, s0 = field.row_sum_coefficients(ensemble.grid)
    N = field.N
    xbar = X.mean(axis=-2, keepdims=True)
    abar = A.mean(axis=-2, keepdims=True)
    Yii = c["a"] * X + c["b"] * xbar + c["e"]
    S = s1 * X + s2 * xbar + s0
    return q.f_a(X, A, xbar, abar) + q.f_n(X, A, xbar, abar) / N + q.ba * Yii + q.bn * S / N


def adjoint_row_sums(field: NPlayerField, ensemble) -> np.ndarray:
    """``sum_j |Y^{ij}_t|`` along the ensemble, shape (..., N, K+1)."""
    X = ensemble.states
    c = field.coefficients(ensemble.grid)
    N = field.N
    xbar = X.mean(axis=-2, keepdims=True)
    diag = np.abs(c["a"] * X + c["b"] * xbar + c["e"])
    if np.any(c["cp"] != 0):
        Xi, Xj = X[..., :, None, :], X[..., None, :, :]
        off = np.abs(c["c"] * Xi + c["cp"] * Xj + c["f"] * xbar[..., None, :] + c["g"]) / N
        return diag + off.sum(axis=-2) - np.diagonal(off, axis1=-3, axis2=-2).swapaxes(-1, -2)
    # c' vanishes identically, so every off-diagonal entry of row i is equal
    return diag + (N - 1) / N * np.abs(c["c"] * X + c["f"] * xbar + c["g"])


def loglog_slope(Ns, values) -> float:
    return float(np.polyfit(np.log(np.asarray(Ns, float)), np.log(np.asarray(values, float)), 1)[0])


def write_residual_csv(path, rows) -> None:
    """Rows of (N, max_eps, max_zeta, max_gamma, fitted_slope)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["N", "max_eps", "max_zeta", "max_gamma", "fitted_slope"])
        for r in rows:
            w.writerow([int(r[0])] + [repr(float(v)) for v in r[1:]])
