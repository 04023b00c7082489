"""Cooperative (central planner) LQ game and its McKean-Vlasov control limit.

With ``rho = Rbar / (R + Rbar)`` the optimal control is

    l(y, xbar, ybar) = -1/(2R) [B y + Sbar (1 - rho) xbar + (Bbar - rho (B + Bbar)) ybar],

the forward drift is ``l1 = A x + Abar xbar + B l(y) + Bbar mean(l(Y))`` and
the adjoint driver ``l2`` is affine in ``(x, xbar, y, ybar)``.  The
decoupling field is affine and solved with the same machinery as the
non-cooperative game.  Measure arguments ``xi`` are ``MeasureSummary``
objects whose second marginal is the adjoint: ``meanA`` holds ``mean(Y)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularR, SpecError
from .ldp import (LdpReport, RateProblem, coupled_sup_w2, estimate_laplace, mean_functional, tail_table)
from .mfg_solver import (AffineField, MeanFlow, solve_affine_field, solve_affine_fbsde_oracle, solve_mean_flow)
from .model import AffineSystem, GeneralLQSpec, MeasureSummary, _drift_from_control
from .particle import TrajectoryEnsemble, _provenance, _run, simulate_auxiliary


def _check(spec):
    if not isinstance(spec, GeneralLQSpec):
        raise SpecError("the cooperative game is defined for the general LQ family")
    if spec.R == 0 or spec.R + spec.Rbar == 0:
        raise SingularR("need R != 0 and R + Rbar != 0")


def ell_coefficients(spec: GeneralLQSpec):
    """(cy, cxbar, cybar) of the optimal control ``l``."""
    _check(spec)
    rho = spec.Rbar / (spec.R + spec.Rbar)
    k = -1.0 / (2 * spec.R)
    return k * spec.B, k * spec.Sbar * (1 - rho), k * (spec.Bbar - rho * (spec.B + spec.Bbar))


def eval_ell(spec: GeneralLQSpec, y, xbar, ybar):
    cy, cx, cyb = ell_coefficients(spec)
    return cy * y + cx * xbar + cyb * ybar


def eval_ell1(spec: GeneralLQSpec, x, y, xi: MeasureSummary):
    """Forward drift from its compact form (composition with ``l``)."""
    return _ell1(spec, x, y, xi.meanX, xi.meanA)


def _ell1(spec, x, y, m, ybar):
    own = eval_ell(spec, y, m, ybar)
    mean_ctrl = eval_ell(spec, ybar, m, ybar)
    return spec.A * x + spec.Abar * m + spec.B * own + spec.Bbar * mean_ctrl


def eval_ell1_expanded(spec: GeneralLQSpec, x, y, xi: MeasureSummary, S: float | None = None):
    """Forward drift from its fully expanded form.

    The expanded mean coefficient contains a product ``S B`` whose factor ``S``
    is not otherwise defined; it must be passed explicitly unless Sbar = 0.
    """
    _check(spec)
    if S is None:
        if spec.Sbar != 0:
            raise SpecError("expanded form needs the coefficient S when Sbar != 0")
        S = 0.0
    R, Rb, B, Bb = spec.R, spec.Rbar, spec.B, spec.Bbar
    rho = Rb / (R + Rb)
    cm = spec.Abar - (S * B + spec.Sbar * Bb) * (1 - rho) / (2 * R)
    cyb = -(Bb * B + (B + Bb) * (Bb - rho * (B + Bb))) / (2 * R)
    return spec.A * x + cm * xi.meanX - B * B / (2 * R) * y + cyb * xi.meanA


def ell2_coefficients(spec: GeneralLQSpec):
    """(cx, cxbar, cy, cybar) of the adjoint driver ``l2``."""
    _check(spec)
    RR = 2 * (spec.R + spec.Rbar)
    return (2 * spec.Q, 2 * spec.Qbar - spec.Sbar**2 / RR, spec.A,
            spec.Abar - spec.Sbar * (spec.B + spec.Bbar) / RR)


def eval_ell2(spec: GeneralLQSpec, x, y, xi: MeasureSummary):
    return _ell2(spec, x, y, xi.meanX, xi.meanA)


def _ell2(spec, x, y, m, ybar):
    cx, cm, cy, cyb = ell2_coefficients(spec)
    return cx * x + cm * m + cy * y + cyb * ybar


def coop_system(spec: GeneralLQSpec) -> AffineSystem:
    cy, cm, cyb = ell_coefficients(spec)
    control = (0.0, cy, cm, cyb)
    dx, dm, dy, dyb = ell2_coefficients(spec)
    return AffineSystem(
        drift=_drift_from_control(spec.quadratic(), control),
        driver=(dx, dy, dm, dyb),
        control=control,
        terminal=(2 * spec.QT, 2 * spec.QbarT),
        sigma=spec.sigma, T=spec.T, x0=spec.x0,
    )


@dataclass(frozen=True, eq=False)
class CoopSolution:
    spec: GeneralLQSpec
    field: AffineField
    flow: MeanFlow
    meanFlowX: np.ndarray
    meanFlowY: np.ndarray

    def control(self, t, x, meanX):
        """Optimal feedback ``l(V(t,x,mu), mean, mean V)``."""
        p, r, s = self.field.coefficients(t)
        y = p * x + r * meanX + s
        ybar = (p + r) * meanX + s
        return eval_ell(self.spec, y, meanX, ybar)


def solve_coop(spec: GeneralLQSpec, K: int = 4000) -> CoopSolution:
    field = solve_affine_field(coop_system(spec), K)
    flow = solve_mean_flow(spec, field)
    mY = (field.p + field.r) * flow.mX + field.s
    return CoopSolution(spec, field, flow, flow.mX, mY)


def coop_pde_residual(spec: GeneralLQSpec, field: AffineField, samples) -> np.ndarray:
    """Residual of the planner's PDE at samples ``(t, x, meanX)``.

    Terms come from ``eval_ell1``/``eval_ell2``; the integral term evaluates
    ``l1`` at ``(y, V(t, y, mu))`` for ``y ~ mu``.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    t, x, m = samples[:, 0], samples[:, 1], samples[:, 2]
    p, r, s = field.coefficients(t)
    dp, dr, ds = field.time_derivative(t)
    ybar = (p + r) * m + s
    y = p * x + r * m + s
    # l1 is affine in its spatial argument, so its mu-average is its value at the mean
    integral = r * _ell1(spec, m, ybar, m, ybar)
    return dp * x + dr * m + ds + p * _ell1(spec, x, y, m, ybar) + _ell2(spec, x, y, m, ybar) + integral


def solve_coop_fbsde_oracle(spec: GeneralLQSpec, K: int):
    return solve_affine_fbsde_oracle(coop_system(spec), K)


def simulate_planner(spec: GeneralLQSpec, sol: CoopSolution, bundle) -> TrajectoryEnsemble:
    """N-player planner system: each player uses ``l(Y^i, xbar^N, ybar^N)``.

    Evaluated from the model coefficients directly (not through the
    decoupled drift), with ``Y^i = V(t, X^i, L^N(X))``.
    """
    grid = bundle.grid
    p, r, s = sol.field.coefficients(grid)
    q = spec.quadratic()

    def step(k, t, X):
        xbar = X.mean(axis=-1, keepdims=True)
        Y = p[k] * X + r[k] * xbar + s[k]
        ybar = Y.mean(axis=-1, keepdims=True)
        a = eval_ell(spec, Y, xbar, ybar)
        return q.b(X, a, xbar, a.mean(axis=-1, keepdims=True)), a

    grid, X, A = _run(spec.x0, bundle, spec.sigma, step)
    return TrajectoryEnsemble(grid, X, A, _provenance("planner", spec, bundle))


def planner_foc_residual(spec: GeneralLQSpec, sol: CoopSolution, ensemble) -> np.ndarray:
    """Planner first-order condition ``2R a^i + B Y^i + mean_j(2Rbar abar + Sbar X^j + Bbar Y^j)``."""
    X, A = ensemble.states, ensemble.controls
    p, r, s = sol.field.coefficients(ensemble.grid)
    xbar = X.mean(axis=-2, keepdims=True)
    Y = p * X + r * xbar + s
    abar = A.mean(axis=-2, keepdims=True)
    common = 2 * spec.Rbar * abar + spec.Sbar * xbar + spec.Bbar * Y.mean(axis=-2, keepdims=True)
    return 2 * spec.R * A + spec.B * Y + common


def perturbed_cost(spec: GeneralLQSpec, sol: CoopSolution, eta, h: float, K: int | None = None) -> float:
    """Mean-dependent part of the social cost of ``alpha_hat + h eta(t)``.

    A deterministic open-loop perturbation shifts means only, so the state
    and control variances (and their cost) do not depend on h.  Integrates
    the unperturbed mean, the perturbed mean and the running cost with RK4.
    """
    field = sol.field
    K = K or field.K
    T = spec.T
    dt = T / K
    a_ = spec.A + spec.Abar
    b_ = spec.B + spec.Bbar

    def rhs(t, z):
        m0, m, _ = z
        kx, km, k0 = field.control_coefficients(t)
        abar = (kx + km) * m0 + k0 + h * eta(t)
        run = (spec.Q + spec.Qbar) * m * m + (spec.R + spec.Rbar) * abar * abar + spec.Sbar * m * abar
        return np.array([a_ * m0 + b_ * ((kx + km) * m0 + k0), a_ * m + b_ * abar, run])

    z = np.array([spec.x0, spec.x0, 0.0])
    for k in range(K):
        t = k * dt
        k1 = rhs(t, z)
        k2 = rhs(t + 0.5 * dt, z + 0.5 * dt * k1)
        k3 = rhs(t + 0.5 * dt, z + 0.5 * dt * k2)
        k4 = rhs(min(t + dt, T), z + dt * k3)
        z = z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return float(z[2] + (spec.QT + spec.QbarT) * z[1] ** 2)


def stationarity_check(spec: GeneralLQSpec, sol: CoopSolution, eta=None, h: float = 0.1, K: int | None = None):
    """Central difference and curvature of the social cost along ``eta``.

    Returns ``(|J(h) - J(-h)|, J(h) + J(-h) - 2 J(0))``.
    """
    if eta is None:
        eta = lambda t: np.cos(3.0 * t) + t  # noqa: E731
    jp, jm, j0 = (perturbed_cost(spec, sol, eta, s, K) for s in (h, -h, 0.0))
    return abs(jp - jm), jp + jm - 2 * j0


def coop_ldp_experiment(spec: GeneralLQSpec, Ns, reps: int, seed: int, functionals=None,
                        deltas=(1e-6, 1e-3), K_sim: int = 50, threads: int = 1, K: int = 4000) -> LdpReport:
    """Tail and Laplace experiments for the planner system against the oracle."""
    sol = solve_coop(spec, K)
    field = sol.field
    report = LdpReport()
    samples = {}
    for N in Ns:
        samples[N] = coupled_sup_w2(lambda b: simulate_planner(spec, sol, b),
                                    lambda b: simulate_auxiliary(spec, field, b),
                                    N, reps, seed, spec.T, K_sim, threads)
    report.extend(tail_table(samples, deltas, kind="coop-tail"))
    for N in Ns:
        s = samples[N]
        report.add(kind="coop-coupling", N=N, delta_or_F="N*sup_t W2^2 (99th pct)",
                   estimate=float(np.quantile(N * s**2, 0.99)))
    if functionals is None:
        m0 = float(sol.flow.mX[-1])
        functionals = [mean_functional("quadratic", m0, 0.5, lam=0.25),
                       mean_functional("exceedance", m0, 0.1, h=0.05, width=0.05)]
    for F in functionals:
        prob = RateProblem(spec, field, F, K=K_sim)
        systems = {"auxiliary": lambda N: (lambda b: simulate_auxiliary(spec, field, b)),
                   "planner": lambda N: (lambda b: simulate_planner(spec, sol, b))}
        report.extend(estimate_laplace(prob, Ns, reps, seed, systems=systems, K_sim=K_sim,
                                       threads=threads, kind="coop-laplace"))
    return report
