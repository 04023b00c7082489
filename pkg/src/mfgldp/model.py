"""Coefficient families and pointwise evaluators.

Both supported families (the inter-bank systemic-risk game and the general
scalar linear-quadratic game) are reduced to one canonical form,
:class:`QuadraticGame`, with

    b(x, a, m, n) = bx*x + ba*a + bm*m + bn*n
    f(x, a, m, n) = 1/2 z' F z,        z = (x, a, m, n)
    g(x, m)       = 1/2 (gxx x^2 + gmm m^2) + gxm x m

where ``m`` is the mean of the state marginal and ``n`` the mean of the
control marginal. For these coefficients every L-derivative in a measure
argument is constant in its spatial variable, so derivatives "in mu" are the
ordinary partials in ``m`` (and "in nu" in ``n``).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Callable, ClassVar, Union

import numpy as np

from .errors import NonConvexHamiltonian, SingularR, SpecError


@dataclass(frozen=True)
class SystemicRiskSpec:
    """Inter-bank lending game with mean reversion ``a`` and incentive ``q``."""

    a: float
    q: float
    eps: float
    c: float
    sigma: float
    T: float
    x0: float = 0.0

    family: ClassVar[str] = "systemic_risk"

    def __post_init__(self):
        if self.a < 0:
            raise SpecError("mean-reversion rate a must be >= 0")
        if self.q**2 > self.eps + 1e-15:
            raise SpecError(f"need q^2 <= eps, got q={self.q}, eps={self.eps}")
        if self.c < 0:
            raise SpecError("terminal weight c must be >= 0")
        _check_common(self.sigma, self.T)

    def quadratic(self) -> "QuadraticGame":
        a, q, eps, c = self.a, self.q, self.eps, self.c
        return QuadraticGame(
            bx=-a, ba=1.0, bm=a, bn=0.0,
            fxx=eps, faa=1.0, fmm=eps, fnn=0.0,
            fxa=q, fxm=-eps, fxn=0.0, fam=-q, fmn=0.0,
            gxx=c, gmm=c, gxm=-c,
            sigma=self.sigma, T=self.T, x0=self.x0,
        )


@dataclass(frozen=True)
class GeneralLQSpec:
    """Scalar LQ game with interaction through state and control means."""

    A: float
    Abar: float
    B: float
    Bbar: float
    Q: float
    Qbar: float
    R: float
    Rbar: float
    Sbar: float
    QT: float
    QbarT: float
    sigma: float
    T: float
    x0: float = 0.0

    family: ClassVar[str] = "general_lq"

    def __post_init__(self):
        if self.R <= 0:
            raise SingularR(f"R must be > 0, got {self.R}")
        if self.R + self.Rbar == 0:
            raise SingularR("R + Rbar must be nonzero")
        _check_common(self.sigma, self.T)

    def quadratic(self) -> "QuadraticGame":
        return QuadraticGame(
            bx=self.A, ba=self.B, bm=self.Abar, bn=self.Bbar,
            fxx=2 * self.Q, faa=2 * self.R, fmm=2 * self.Qbar, fnn=2 * self.Rbar,
            fxa=0.0, fxm=0.0, fxn=self.Sbar, fam=0.0, fmn=0.0,
            gxx=2 * self.QT, gmm=2 * self.QbarT, gxm=0.0,
            sigma=self.sigma, T=self.T, x0=self.x0,
        )


GameSpec = Union[SystemicRiskSpec, GeneralLQSpec]
_FAMILIES = {cls.family: cls for cls in (SystemicRiskSpec, GeneralLQSpec)}


def _check_common(sigma, T):
    if not sigma > 0:
        raise SpecError("sigma must be > 0 (uniform ellipticity)")
    if not T > 0:
        raise SpecError("horizon T must be > 0")


def spec_to_dict(spec: GameSpec) -> dict:
    d = {"family": spec.family}
    d.update(dataclasses.asdict(spec))
    return d


def spec_from_dict(d: dict) -> GameSpec:
    d = dict(d)
    try:
        cls = _FAMILIES[d.pop("family")]
    except KeyError as exc:
        raise SpecError(f"unknown or missing family: {exc}") from None
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise SpecError(f"unknown fields for {cls.family}: {sorted(unknown)}")
    try:
        return cls(**{k: float(v) for k, v in d.items()})
    except TypeError as exc:
        raise SpecError(str(exc)) from None


def spec_to_json(spec: GameSpec) -> str:
    return json.dumps(spec_to_dict(spec), sort_keys=True)


def spec_from_json(text: str) -> GameSpec:
    return spec_from_dict(json.loads(text))


@dataclass(frozen=True)
class MeasureSummary:
    """First and second moments of a joint state/control law.

    Second moments default to the squared means (a Dirac law).
    """

    meanX: float
    meanA: float = 0.0
    m2X: float | None = None
    m2A: float | None = None

    def __post_init__(self):
        if self.m2X is None:
            object.__setattr__(self, "m2X", self.meanX**2)
        if self.m2A is None:
            object.__setattr__(self, "m2A", self.meanA**2)
        tol = 1e-12 * (1 + self.meanX**2 + self.meanA**2)
        if np.any(self.m2X < self.meanX**2 - tol) or np.any(self.m2A < self.meanA**2 - tol):
            raise SpecError("second moment below squared mean")


@dataclass(frozen=True)
class QuadraticGame:
    bx: float
    ba: float
    bm: float
    bn: float
    fxx: float
    faa: float
    fmm: float
    fnn: float
    fxa: float
    fxm: float
    fxn: float
    fam: float
    fmn: float
    gxx: float
    gmm: float
    gxm: float
    sigma: float
    T: float
    x0: float

    # pointwise maps; all accept numpy arrays and broadcast

    def b(self, x, a, m, n):
        return self.bx * x + self.ba * a + self.bm * m + self.bn * n

    def f(self, x, a, m, n):
        return (0.5 * (self.fxx * x * x + self.faa * a * a + self.fmm * m * m + self.fnn * n * n)
                + self.fxa * x * a + self.fxm * x * m + self.fxn * x * n
                + self.fam * a * m + self.fmn * m * n)

    def g(self, x, m):
        return 0.5 * (self.gxx * x * x + self.gmm * m * m) + self.gxm * x * m

    def f_x(self, x, a, m, n):
        return self.fxx * x + self.fxa * a + self.fxm * m + self.fxn * n

    def f_a(self, x, a, m, n):
        return self.faa * a + self.fxa * x + self.fam * m

    def f_m(self, x, a, m, n):
        return self.fmm * m + self.fxm * x + self.fam * a + self.fmn * n

    def f_n(self, x, a, m, n):
        return self.fnn * n + self.fxn * x + self.fmn * m

    def g_x(self, x, m):
        return self.gxx * x + self.gxm * m

    def g_m(self, x, m):
        return self.gmm * m + self.gxm * x

    @property
    def gamma(self) -> float:
        """Strong-convexity constant of the Hamiltonian in the control."""
        return 0.5 * self.faa

    def lambda_coefficients(self) -> tuple[float, float, float]:
        """(lx, ly, lm) with Lambda(x, y, m) = lx*x + ly*y + lm*m."""
        if self.faa <= 0:
            raise NonConvexHamiltonian(f"control weight {0.5 * self.faa} is not positive")
        return -self.fxa / self.faa, -self.ba / self.faa, -self.fam / self.faa

    def mfg_system(self) -> "AffineSystem":
        """The maps B, F, G entering the master equation, as affine forms."""
        lx, ly, lm = self.lambda_coefficients()
        control = (lx, ly, lm, 0.0)
        cx, cy, cm, cyb = control
        return AffineSystem(
            drift=_drift_from_control(self, control),
            driver=(
                self.fxx + self.fxa * cx,
                self.fxa * cy + self.bx,
                self.fxa * cm + self.fxm + self.fxn * (cx + cm),
                self.fxa * cyb + self.fxn * (cy + cyb),
            ),
            control=control,
            terminal=(self.gxx, self.gxm),
            sigma=self.sigma, T=self.T, x0=self.x0,
        )


def _drift_from_control(game: QuadraticGame, control):
    cx, cy, cm, cyb = control
    return (
        game.bx + game.ba * cx,
        game.ba * cy,
        game.bm + game.ba * cm + game.bn * (cx + cm),
        game.ba * cyb + game.bn * (cy + cyb),
    )


@dataclass(frozen=True)
class AffineSystem:
    """Forward drift, backward driver and control of a decoupled LQ FBSDE.

    Each of ``drift``, ``driver`` and ``control`` holds coefficients
    ``(cx, cy, cm, cyb)`` of an affine form ``cx*x + cy*y + cm*mean(X) + cyb*mean(Y)``;
    ``terminal`` is ``(gx, gm)`` for ``Y_T = gx*X_T + gm*mean(X_T)``.
    """

    drift: tuple[float, float, float, float]
    driver: tuple[float, float, float, float]
    control: tuple[float, float, float, float]
    terminal: tuple[float, float]
    sigma: float
    T: float
    x0: float


def quadratic(spec) -> QuadraticGame:
    return spec if isinstance(spec, QuadraticGame) else spec.quadratic()


@dataclass(frozen=True)
class CoefficientDerivatives:
    """Partial and L-derivatives of b, f, g.

    Each entry maps ``(x, a, m, n)`` (or ``(x, m)`` for g) to a value; the
    L-derivative evaluators take a trailing spatial argument ``v`` which
    they ignore, being constant in it for mean-functional dependence.
    """

    dxb: Callable
    dab: Callable
    dmub: Callable
    dxf: Callable
    daf: Callable
    dmuf: Callable
    dnuf: Callable
    dxg: Callable
    dmug: Callable


def derivatives(spec: GameSpec) -> CoefficientDerivatives:
    q = quadratic(spec)
    return CoefficientDerivatives(
        dxb=lambda x, a, m, n: q.bx + 0.0 * x,
        dab=lambda x, a, m, n: q.ba + 0.0 * x,
        dmub=lambda x, a, m, n, v=0.0: q.bm + 0.0 * x + 0.0 * v,
        dxf=q.f_x,
        daf=q.f_a,
        dmuf=lambda x, a, m, n, v=0.0: q.f_m(x, a, m, n) + 0.0 * v,
        dnuf=lambda x, a, m, n, v=0.0: q.f_n(x, a, m, n) + 0.0 * v,
        dxg=q.g_x,
        dmug=lambda x, m, v=0.0: q.g_m(x, m) + 0.0 * v,
    )


def eval_drift_b(spec: GameSpec, t, x, a, xi: MeasureSummary):
    return quadratic(spec).b(x, a, xi.meanX, xi.meanA)


def eval_cost_f(spec: GameSpec, t, x, a, xi: MeasureSummary):
    return quadratic(spec).f(x, a, xi.meanX, xi.meanA)


def eval_terminal_g(spec: GameSpec, x, mu: MeasureSummary):
    return quadratic(spec).g(x, mu.meanX)


def eval_hamiltonian_H(spec: GameSpec, t, x, y, a, xi: MeasureSummary):
    q = quadratic(spec)
    return q.f(x, a, xi.meanX, xi.meanA) + q.b(x, a, xi.meanX, xi.meanA) * y


def eval_dH_da(spec: GameSpec, t, x, y, a, xi: MeasureSummary):
    """Partial derivative of H in the control, with the measure held fixed."""
    q = quadratic(spec)
    return q.f_a(x, a, xi.meanX, xi.meanA) + q.ba * y


def eval_lambda(spec: GameSpec, t, x, y, mu: MeasureSummary):
    """Minimiser in the control of the Hamiltonian."""
    lx, ly, lm = quadratic(spec).lambda_coefficients()
    return lx * x + ly * y + lm * mu.meanX


def eval_barB(spec: GameSpec, field, t, x, mu: MeasureSummary):
    """Decoupled drift x -> B(t, x, V(t,x,mu), law(chi, V(t,chi,mu)))."""
    bx, bm, b0 = field.drift_coefficients(t)
    return bx * x + bm * mu.meanX + b0


def psi_pushforward(spec: GameSpec, field, t, mu):
    """Push each atom of ``mu`` through x -> Lambda(t, x, V(t,x,mu), mu)."""
    from .measure import EmpiricalMeasure

    kx, km, k0 = field.control_coefficients(t)
    atoms = np.asarray(mu.atoms, dtype=float)
    return EmpiricalMeasure(kx * atoms + km * atoms.mean() + k0)


def psi_lipschitz_constant(spec: GameSpec, field, t=None) -> float:
    """``Lip(Lambda) (1 + Lip(V))`` bounding W2(Psi mu, Psi nu) / W2(mu, nu).

    Lip(Lambda) sums the moduli of the (x, y, mean) coefficients and Lip(V)
    is ``|p| + |r|`` at t, or its supremum over the grid when t is None.
    """
    lx, ly, lm = quadratic(spec).lambda_coefficients()
    if t is None:
        lv = float(np.max(np.abs(field.p) + np.abs(field.r)))
    else:
        p, r, _ = field.coefficients(t)
        lv = float(abs(p) + abs(r))
    return (abs(lx) + abs(ly) + abs(lm)) * (1.0 + lv)


# --- assumption predicates -------------------------------------------------

def lipschitz_constant_b(spec: GameSpec) -> float:
    q = quadratic(spec)
    return max(abs(q.bx), abs(q.ba), abs(q.bm) + abs(q.bn))


def check_assumptions(spec: GameSpec, samples: int = 1000, seed: int = 0) -> dict:
    """Numerical checks of the structural conditions on an LQ instance.

    Returns a mapping ``name -> {"pass": bool, "detail": str}`` for A1-A5
    plus the drift monotonicity condition A8 (reported, not required).
    """
    q = quadratic(spec)
    rng = np.random.default_rng(seed)
    x, x2, a, a2, m, m2, n, n2, y = rng.uniform(-5, 5, size=(9, samples))
    out = {}

    lb = lipschitz_constant_b(q)
    lhs = np.abs(q.b(x, a, m, n) - q.b(x2, a2, m2, n2))
    w2 = np.hypot(m - m2, n - n2)
    rhs = lb * (np.abs(x - x2) + np.abs(a - a2) + w2)
    lip_ok = bool(np.all(lhs <= rhs * (1 + 1e-12) + 1e-12))
    cf = sum(abs(getattr(q, k)) for k in ("fxx", "faa", "fmm", "fnn", "fxa", "fxm", "fxn", "fam", "fmn"))
    cg = abs(q.gxx) + abs(q.gmm) + abs(q.gxm)
    # second moments >= squared means, take the Dirac case as the tightest
    grow_f = np.all(np.abs(q.f(x, a, m, n)) <= cf * (1 + x * x + a * a + m * m + n * n) + 1e-12)
    grow_g = np.all(np.abs(q.g(x, m)) <= cg * (1 + x * x + m * m) + 1e-12)
    out["A1"] = {"pass": bool(lip_ok and grow_f and grow_g),
                 "detail": f"L_b={lb:.6g}; quadratic growth constants f:{cf:.6g} g:{cg:.6g}"}

    fan = 0.0  # no a*n term exists in the canonical form
    out["A2"] = {"pass": fan == 0.0, "detail": "b, f split into control/state-mean and state/joint-law parts"}

    hess_ok = q.fxx >= -1e-14 and q.faa > 0 and q.fxx * q.faa - q.fxa**2 >= -1e-12
    ok3 = hess_ok and q.gxx >= 0
    if q.faa > 0:
        h = lambda aa: q.f(x, aa, m, n) + q.b(x, aa, m, n) * y  # noqa: E731
        dha2 = q.f_a(x, a2, m, n) + q.ba * y
        gap = h(a) - h(a2) - (a - a2) * dha2
        ok3 = ok3 and bool(np.allclose(gap, q.gamma * (a - a2) ** 2, rtol=1e-10, atol=1e-10))
    out["A3"] = {"pass": bool(ok3), "detail": f"gamma={q.gamma:.6g}; Hessian of H in (x,a) PSD={hess_ok}; g convex={q.gxx >= 0}"}

    out["A4"] = {"pass": True, "detail": f"d_mu b = {q.bm:.6g} (constant); d_xi f, d_mu g affine"}
    out["A5"] = {"pass": q.sigma > 0, "detail": f"sigma={q.sigma:.6g}"}
    kb = -q.bx
    out["A8"] = {"pass": kb > 0, "detail": f"K_b={kb:.6g}"}
    return out


def is_finite(*vals) -> bool:
    return all(math.isfinite(v) for v in vals)
