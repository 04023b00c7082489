"""Large-deviation experiments: rate oracle, Laplace estimates, tail decay.

Target functionals depend on the law only through its mean at a fixed
time.  For those, the infimum defining the rate function is attained by a
deterministic control, and the controlled mean obeys the forced linear ODE

    m' = kappa(t) m + B0(t) + sigma u(t),     kappa = Bx + Bm,

so that ``m_t = m0_t + sigma * sum_k w_k u_k`` for a piecewise constant
control ``u_k`` with weights ``w_k = int_{cell k} Phi(t, s) ds``.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import stats
from scipy.integrate import cumulative_simpson, simpson
from scipy.optimize import brentq
from scipy.special import expit, logsumexp

from .errors import AllZeroEvents, DegenerateEstimate, FieldDomainError, NonConvergence, NonInvertible, SpecError
from .measure import w2_sorted
from .mfg_solver import solve_mean_flow
from .particle import BrownianBundle, simulate_auxiliary, simulate_equilibrium

REPORT_COLUMNS = ("kind", "N", "delta_or_F", "estimate", "ci_lo", "ci_hi", "oracle", "slope_N", "slope_N2", "r2")


# --- target functionals ------------------------------------------------------

@dataclass(frozen=True)
class MeanFunctional:
    """Bounded continuous function of the mean of a measure.

    kinds: ``zero``; ``constant`` (value c); ``quadratic``
    ``lam * min((m - kappa)^2, clip)``; ``exceedance``
    ``h * expit((kappa - m) / width)``; ``pin`` (hard constraint ``m = kappa``,
    zero on it and infinite elsewhere, used for contraction targets).
    """

    kind: str
    c: float = 0.0
    lam: float = 0.0
    kappa: float = 0.0
    clip: float = 1.0
    h: float = 0.0
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "quadratic", "exceedance", "pin"):
            raise SpecError(f"unknown functional kind {self.kind!r}")
        if self.kind == "exceedance" and not self.width > 0:
            raise SpecError("exceedance width must be positive")

    def __call__(self, m):
        m = np.asarray(m, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(m)
        if self.kind == "constant":
            return np.full_like(m, self.c)
        if self.kind == "quadratic":
            return self.lam * np.minimum((m - self.kappa) ** 2, self.clip)
        if self.kind == "exceedance":
            return self.h * expit((self.kappa - m) / self.width)
        return np.where(np.abs(m - self.kappa) <= 1e-12 * (1 + abs(self.kappa)), 0.0, np.inf)

    def derivative(self, m):
        m = np.asarray(m, dtype=float)
        if self.kind == "quadratic":
            d = m - self.kappa
            return np.where(d * d < self.clip, 2 * self.lam * d, 0.0)
        if self.kind == "exceedance":
            s = expit((self.kappa - m) / self.width)
            return -self.h * s * (1 - s) / self.width
        return np.zeros_like(m)

    def kinks(self):
        if self.kind == "quadratic":
            r = math.sqrt(self.clip)
            return [self.kappa - r, self.kappa + r]
        return []

    def label(self) -> str:
        if self.kind == "zero":
            return "zero"
        if self.kind == "constant":
            return f"constant(c={self.c:g})"
        if self.kind == "quadratic":
            return f"quadratic(lam={self.lam:g},kappa={self.kappa:.6g},clip={self.clip:g})"
        if self.kind == "exceedance":
            return f"exceedance(h={self.h:g},kappa={self.kappa:.6g},width={self.width:g})"
        return f"pin(kappa={self.kappa:.6g})"


def mean_functional(kind: str, reference: float = 0.0, shift: float = 0.0, **params) -> MeanFunctional:
    """Catalog constructor; ``kappa = reference + shift`` (reference = unforced mean)."""
    if kind in ("quadratic", "exceedance", "pin"):
        params["kappa"] = reference + shift
    return MeanFunctional(kind, **params)


# --- rate oracle -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RateProblem:
    """Minimise ``F(mean of X^u at t_end) + 1/2 int |u|^2`` over controls on a grid."""

    spec: object
    field: object
    F: MeanFunctional
    K: int = 50
    t_end: float | None = None
    refine: int = 16

    def __post_init__(self):
        if self.K < 1:
            raise SpecError("control grid needs K >= 1")
        t = self.field.T if self.t_end is None else float(self.t_end)
        if not 0 < t <= self.field.T + 1e-12:
            raise FieldDomainError(f"t_end={t} outside (0, {self.field.T}]")
        object.__setattr__(self, "t_end", min(t, self.field.T))

    @property
    def sigma(self) -> float:
        return self.field.system.sigma

    @property
    def dt(self) -> float:
        return self.t_end / self.K

    @functools.cached_property
    def weights(self) -> np.ndarray:
        """``w_k = int_{cell k} Phi(t_end, s) ds`` by Simpson on a refined grid."""
        n = self.K * self.refine
        s = np.linspace(0.0, self.t_end, n + 1)
        bx, bm, _ = self.field.drift_coefficients(s)
        cum = cumulative_simpson(bx + bm, x=s, initial=0.0)
        phi = np.exp(cum[-1] - cum)
        cells = phi[: n].reshape(self.K, self.refine)
        ends = phi[self.refine:: self.refine][:, None]
        pts = np.concatenate([cells, ends], axis=1)
        return simpson(pts, dx=self.dt / self.refine, axis=1)

    @functools.cached_property
    def unforced_mean(self) -> float:
        flow = solve_mean_flow(self.spec, self.field)
        return float(flow.mean_at(self.t_end))

    @property
    def gain(self) -> float:
        """``sum w_k^2 / dt``: variance of the mean per unit sigma^2 and per 1/N."""
        return float(np.sum(self.weights**2) / self.dt)

    def terminal_mean(self, u) -> float:
        return self.unforced_mean + self.sigma * float(np.dot(self.weights, u))

    def cost(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(self.F(self.terminal_mean(u))) + 0.5 * self.dt * float(np.dot(u, u))

    def mean_rate(self, m) -> np.ndarray:
        """Rate of the mean alone: ``(m - m0)^2 / (2 sigma^2 gain)``."""
        return (np.asarray(m, dtype=float) - self.unforced_mean) ** 2 / (2 * self.sigma**2 * self.gain)


@dataclass(frozen=True, eq=False)
class RateSolution:
    value: float
    u: np.ndarray
    mean: float
    grad_norm: float
    iterations: int
    method: str


def _solution_from_mean(prob: RateProblem, m: float, method: str) -> RateSolution:
    w = prob.weights
    c = (m - prob.unforced_mean) / (prob.sigma * float(np.dot(w, w)))
    u = c * w
    return RateSolution(float(prob.F(m)) + float(prob.mean_rate(m)), u, float(m), 0.0, 0, method)


def rate_by_gradient(prob: RateProblem, tol: float = 1e-8, max_iter: int = 20000) -> RateSolution:
    """Projected gradient descent with Armijo backtracking.

    The gradient is taken in the L2(0, t_end) metric: ``sigma F'(m) w / dt + u``.
    For the ``pin`` target the iterates are projected on the constraint.
    """
    w, dt, sig = prob.weights, prob.dt, prob.sigma
    pin = prob.F.kind == "pin"
    ww = float(np.dot(w, w))

    def project(u):
        gap = prob.F.kappa - prob.terminal_mean(u)
        return u + w * gap / (sig * ww)

    def objective(u):
        if pin:
            return 0.5 * dt * float(np.dot(u, u))
        return prob.cost(u)

    u = project(np.zeros(prob.K)) if pin else np.zeros(prob.K)
    J = objective(u)
    for it in range(max_iter):
        if pin:
            g = u - w * float(np.dot(w, u)) / ww
        else:
            g = sig * float(prob.F.derivative(prob.terminal_mean(u))) * w / dt + u
        gn = math.sqrt(dt * float(np.dot(g, g)))
        if gn <= tol:
            value = prob.cost(u) if not pin else objective(u)
            return RateSolution(value, u, prob.terminal_mean(u), gn, it, "gradient")
        step = 1.0
        while True:
            trial = u - step * g
            if pin:
                trial = project(trial)
            Jt = objective(trial)
            if Jt <= J - 1e-4 * step * gn * gn or step < 1e-14:
                break
            step *= 0.5
        u, J = trial, Jt
    raise NonConvergence(f"gradient norm {gn:.3e} > {tol:g} after {max_iter} iterations")


def rate_by_shooting(prob: RateProblem) -> RateSolution:
    """Pontryagin two-point condition reduced to a scalar root problem.

    The costate is ``F'(m_T) Phi(t_end, s)``, so ``u = -sigma F'(m_T) w / dt`` and
    the terminal mean solves ``m - m0 + sigma^2 gain F'(m) = 0``.  All
    bracketed roots (and kinks of F) are compared by total cost.
    """
    m0, v = prob.unforced_mean, prob.sigma**2 * prob.gain
    F = prob.F
    if F.kind == "pin":
        return _solution_from_mean(prob, F.kappa, "shooting")
    if F.kind in ("zero", "constant"):
        return _solution_from_mean(prob, m0, "shooting")
    G = lambda m: m - m0 + v * float(F.derivative(m))  # noqa: E731
    reach = 5.0 + 3.0 * abs(F.kappa - m0) + 5.0 * math.sqrt(v) + v * (F.lam * 2 * math.sqrt(F.clip) + F.h / F.width)
    xs = np.linspace(m0 - reach, m0 + reach, 4001)
    xs = np.union1d(xs, [k for k in F.kinks() if abs(k - m0) < reach])
    gs = np.array([G(x) for x in xs])
    cands = [x for x, g in zip(xs, gs) if g == 0.0] + [k for k in F.kinks() if abs(k - m0) < reach]
    for i in np.nonzero(np.sign(gs[:-1]) * np.sign(gs[1:]) < 0)[0]:
        cands.append(brentq(G, xs[i], xs[i + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200))
    costs = [float(F(m)) + float(prob.mean_rate(m)) for m in cands]
    best = cands[int(np.argmin(costs))]
    return _solution_from_mean(prob, best, "shooting")


def evaluate_rate_oracle(prob: RateProblem, tol: float = 1e-8) -> tuple[float, np.ndarray]:
    """Value ``inf (F + rate)`` and the optimal control path (gradient method)."""
    sol = rate_by_gradient(prob, tol=tol)
    return sol.value, sol.u


def rate_for_controls(prob: RateProblem, t: float, nu_mean: float) -> float:
    """Rate of a control-law target at time t, described by its mean.

    The control law is the pushforward of the state law under
    ``x -> Lambda(t, x, V(t,x,mu), mu)``; on means it acts as
    ``m -> (kx + km) m + k0``, inverted here before calling the oracle.
    """
    kx, km, k0 = (float(c) for c in prob.field.control_coefficients(t))
    slope = kx + km
    if abs(slope) <= 1e-12 * (1 + abs(kx) + abs(km)):
        raise NonInvertible(f"control-mean map has slope {slope:.3e} at t={t}")
    m_target = (nu_mean - k0) / slope
    sub = RateProblem(prob.spec, prob.field, MeanFunctional("pin", kappa=m_target), prob.K, t)
    return rate_by_gradient(sub).value


def control_mean_map(field, t):
    """(slope, intercept) of the control-mean map at time t."""
    kx, km, k0 = (float(c) for c in field.control_coefficients(t))
    return kx + km, k0


# --- Monte Carlo -------------------------------------------------------------

@dataclass
class LdpReport:
    rows: list = dc_field(default_factory=list)
    fits: dict = dc_field(default_factory=dict)

    def add(self, **kw):
        row = {k: kw.get(k, "") for k in REPORT_COLUMNS}
        self.rows.append(row)
        return row

    def extend(self, other: "LdpReport"):
        self.rows.extend(other.rows)
        self.fits.update(other.fits)

    def select(self, **kw):
        return [r for r in self.rows if all(r[k] == v for k, v in kw.items())]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[k]) for k in REPORT_COLUMNS])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def laplace_estimate(values, N: int, seed: int = 0, resamples: int = 1000, level: float = 0.95):
    """``-(1/N) log mean exp(-N F)`` with a percentile bootstrap interval."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise SpecError("need at least two replications")
    if np.all(np.isinf(values)):
        raise DegenerateEstimate("every sample has exp(-N F) = 0")

    def stat(v, axis=-1):
        return -(logsumexp(-N * v, axis=axis) - math.log(v.shape[axis])) / N

    est = float(stat(values))
    if np.all(values == values[0]):
        return est, est, est
    res = stats.bootstrap((values,), stat, n_resamples=resamples, method="percentile",
                          confidence_level=level, vectorized=True, random_state=np.random.default_rng(seed))
    return est, float(res.confidence_interval.low), float(res.confidence_interval.high)


def terminal_means(simulate, N, reps, seed, T, K_sim, threads=1, chunk=None, t_index=-1):
    """Empirical means at a node for ``reps`` replications, in chunks."""
    chunk = chunk or max(1, 2**22 // (N * (K_sim + 1)))
    out = []
    for lo in range(0, reps, chunk):
        bundle = _bundle_slice(seed, N, K_sim, T, lo, min(reps, lo + chunk), threads)
        ens = simulate(bundle)
        out.append(ens.states[..., t_index].mean(axis=-1))
    return np.concatenate(out)


def _bundle_slice(seed, N, K, T, lo, hi, threads):
    from .particle import seed_words, standard_normals

    words = np.concatenate([seed_words(seed, N, r) for r in range(lo, hi)])
    inc = standard_normals(words, N, K, threads) * math.sqrt(T / K)
    return BrownianBundle(int(seed), N, K, float(T), inc, words)


def estimate_laplace(prob: RateProblem, Ns, reps: int, seed: int, systems=("auxiliary",),
                     K_sim: int = 50, threads: int = 1, nash_K: int = 1000, kind: str = "laplace") -> LdpReport:
    """Laplace-functional estimates per N for the requested particle systems.

    ``systems`` names built-in systems (``auxiliary``, ``equilibrium``) or is
    a mapping ``name -> factory(N) -> simulate(bundle)``.  All systems for a
    given N run on the same Brownian bundles.
    """
    if reps < 100:
        raise SpecError("Laplace estimates need reps >= 100")
    factories = systems if isinstance(systems, dict) else {s: _builtin_system(prob, s, nash_K) for s in systems}
    oracle = evaluate_rate_oracle(prob)[0] if prob.F.kind != "pin" else float("nan")
    t_index = int(round(prob.t_end / prob.field.T * K_sim))
    report = LdpReport()
    for N in Ns:
        for name, factory in factories.items():
            m = terminal_means(factory(N), N, reps, seed, prob.field.T, K_sim, threads, t_index=t_index)
            est, lo, hi = laplace_estimate(prob.F(m), N, seed=seed + N)
            report.add(kind=f"{kind}-{name}", N=N, delta_or_F=prob.F.label(), estimate=est,
                       ci_lo=lo, ci_hi=hi, oracle=oracle)
    return report


def _builtin_system(prob, name, nash_K):
    from .nplayer import solve_nplayer_nash

    if name == "auxiliary":
        return lambda N: (lambda b: simulate_auxiliary(prob.spec, prob.field, b))
    if name == "equilibrium":
        def factory(N):
            nf = solve_nplayer_nash(prob.spec, N, nash_K)
            return lambda b: simulate_equilibrium(prob.spec, nf, b)
        return factory
    raise SpecError(f"unknown system {name!r}")


def coupled_sup_w2(sim_a, sim_b, N, reps, seed, T, K_sim, threads=1, chunk=None) -> np.ndarray:
    """``sup_k W2(L^N(A_k), L^N(B_k))`` per replication, A and B on shared noise."""
    chunk = chunk or max(1, 2**21 // (N * (K_sim + 1)))
    out = []
    for lo in range(0, reps, chunk):
        bundle = _bundle_slice(seed, N, K_sim, T, lo, min(reps, lo + chunk), threads)
        a, b = sim_a(bundle).states, sim_b(bundle).states
        out.append(np.max(w2_sorted(a, b, axis=-2), axis=-1))
    return np.concatenate(out)


def nash_vs_auxiliary(spec, field, N, reps, seed, K_sim=50, threads=1, nash_K=1000):
    from .nplayer import solve_nplayer_nash

    nf = solve_nplayer_nash(spec, N, nash_K)
    return coupled_sup_w2(lambda b: simulate_equilibrium(spec, nf, b),
                          lambda b: simulate_auxiliary(spec, field, b),
                          N, reps, seed, field.T, K_sim, threads)


def fit_line(x, y):
    """(slope, R^2) of a least-squares line."""
    r = stats.linregress(np.asarray(x, float), np.asarray(y, float))
    return float(r.slope), float(r.rvalue**2)


def tail_table(samples: dict, deltas, kind="tail") -> LdpReport:
    """Tail probabilities ``P(stat > delta)`` per (N, delta) and their decay fits.

    ``samples`` maps N to the per-replication statistic.  Cells with zero
    events are reported and left out of the fits.
    """
    report = LdpReport()
    Ns = sorted(samples)
    for d in deltas:
        pts = []
        cells = []
        for N in Ns:
            s = samples[N]
            k = int(np.sum(s > d))
            ci = stats.binomtest(k, s.size).proportion_ci(0.95, method="exact")
            cells.append((N, k / s.size, ci.low, ci.high))
            if k > 0:
                pts.append((N, math.log(k / s.size)))
        if len(pts) < 2 and d > 0:
            fit = (float("nan"),) * 4
            report.fits[(kind, float(d))] = {"zero_cells": [c[0] for c in cells if c[1] == 0], "error": "AllZeroEvents"}
        elif len(pts) < 2 or all(p[1] == 0.0 for p in pts):
            fit = (0.0, 1.0, 0.0, 1.0)
        else:
            n, lp = np.array(pts).T
            fit = fit_line(n, lp) + fit_line(n**2, lp)
        report.fits.setdefault((kind, float(d)), {}).update(
            slope_N=fit[0], r2_N=fit[1], slope_N2=fit[2], r2_N2=fit[3],
            zero_cells=[c[0] for c in cells if c[1] == 0])
        for N, p, lo, hi in cells:
            report.add(kind=kind, N=N, delta_or_F=float(d), estimate=p, ci_lo=lo, ci_hi=hi,
                       slope_N=fit[0], slope_N2=fit[2], r2=fit[1])
    return report


def fit_tail_decay(spec, field, deltas, Ns, reps, seed, K_sim=50, threads=1, nash_K=1000) -> LdpReport:
    """Tail probabilities of the coupled Nash/auxiliary distance and decay fits."""
    samples = {N: nash_vs_auxiliary(spec, field, N, reps, seed, K_sim, threads, nash_K) for N in Ns}
    report = tail_table(samples, deltas)
    for d in deltas:
        f = report.fits[("tail", float(d))]
        if d > 0 and f.get("error") == "AllZeroEvents":
            raise AllZeroEvents(f"delta={d}: fewer than two cells with events")
    return report


def calibrate_delta(samples, quantile: float = 0.8) -> float:
    return float(np.quantile(samples, quantile))


def mann_kendall_upward(values) -> float:
    """One-sided p-value for an increasing trend (Kendall tau against index)."""
    v = np.asarray(values, dtype=float)
    return float(stats.kendalltau(np.arange(v.size), v, alternative="greater").pvalue)
