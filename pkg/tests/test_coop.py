import numpy as np
import pytest

from mfgldp.coop import (coop_ldp_experiment, coop_pde_residual, eval_ell, eval_ell1, eval_ell1_expanded, eval_ell2,
                         planner_foc_residual, simulate_planner, solve_coop, solve_coop_fbsde_oracle,
                         stationarity_check)
from mfgldp.errors import SingularR, SpecError
from mfgldp.model import GeneralLQSpec, MeasureSummary
from mfgldp.particle import BrownianBundle

from conftest import default_spec, lq_spec, zero_lq


def gen(**kw):
    p = dict(A=0.0, Abar=0.0, B=0.0, Bbar=0.0, Q=0.0, Qbar=0.0, R=1.0, Rbar=0.0, Sbar=0.0,
             QT=0.0, QbarT=0.0, sigma=1.0, T=1.0)
    p.update(kw)
    return GeneralLQSpec(**p)


def test_ell_examples():
    assert eval_ell(gen(R=1, B=1), 2.0, 0.0, 0.0) == pytest.approx(-1.0)
    assert eval_ell(lq_spec(), 0.0, 0.0, 0.0) == 0.0
    s = gen(R=1, Rbar=1, B=1, Bbar=0, Sbar=2)
    assert eval_ell(s, 0.0, 1.0, 2.0) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(SpecError):
        eval_ell(default_spec(), 1.0, 0.0, 0.0)


def test_ell2_example():
    s = gen(Q=1.0, R=0.6, Rbar=0.4)
    assert eval_ell2(s, 3.0, 0.7, MeasureSummary(2.0, 1.0)) == pytest.approx(6.0)


def test_ell1_examples():
    s = gen(A=1, Abar=1, B=1, Bbar=1, R=1)
    xi = MeasureSummary(1.0, 1.0)
    assert eval_ell1(s, 1.0, 0.0, xi) == pytest.approx(0.5)
    assert eval_ell1_expanded(s, 1.0, 0.0, xi) == pytest.approx(0.5)
    z = gen(B=0.0)
    assert eval_ell1(z, 1.3, 0.4, MeasureSummary(2.0, -1.0)) == 0.0
    with pytest.raises(SpecError):
        eval_ell1_expanded(lq_spec(), 1.0, 0.0, xi)


def test_ell1_compact_vs_expanded():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        A, Ab, B, Bb, Rb = rng.normal(size=5)
        R = rng.uniform(0.2, 2.0)
        if abs(R + Rb) < 0.1:
            continue
        s = gen(A=A, Abar=Ab, B=B, Bbar=Bb, R=R, Rbar=Rb)
        x, y, m, yb = rng.normal(size=4) * 3
        xi = MeasureSummary(m, yb)
        assert eval_ell1(s, x, y, xi) == pytest.approx(eval_ell1_expanded(s, x, y, xi), abs=1e-12, rel=1e-12)


def test_singular_R():
    with pytest.raises(SingularR):
        gen(R=1.0, Rbar=-1.0)


def test_zero_cost():
    sol = solve_coop(zero_lq(), 200)
    assert not np.any(sol.field.p) and not np.any(sol.field.r) and not np.any(sol.field.s)
    assert sol.control(0.2, 1.0, 0.5) == 0.0


def test_terminal_and_residual(lq, coop_sol):
    f = coop_sol.field
    assert (f.p[-1], f.r[-1], f.s[-1]) == (2 * lq.QT, 2 * lq.QbarT, 0.0)
    rng = np.random.default_rng(1)
    samples = np.column_stack([rng.uniform(0, lq.T, 100), rng.uniform(-3, 3, 100), rng.uniform(-3, 3, 100)])
    assert np.max(np.abs(coop_pde_residual(lq, f, samples))) <= 1e-8


def test_residual_order(lq):
    rng = np.random.default_rng(2)
    samples = np.column_stack([rng.uniform(0, lq.T, 100), rng.uniform(-3, 3, 100), rng.uniform(-3, 3, 100)])
    res = [np.max(np.abs(coop_pde_residual(lq, solve_coop(lq, K).field, samples))) for K in (25, 50)]
    assert res[0] / res[1] >= 8


def test_oracle_first_order(lq, coop_sol):
    ref = np.array(coop_sol.field.coefficients(0.0))
    errs = []
    for K in (100, 200, 400):
        o = solve_coop_fbsde_oracle(lq, K)
        errs.append(np.abs(np.array([o.P[0], o.R[0], o.S[0]]) - ref).max())
    for a, b in zip(errs, errs[1:]):
        assert 1.6 <= a / b <= 2.4


def test_mean_flows(lq, coop_sol):
    f = coop_sol.field
    g = f.grid
    mX, mY = coop_sol.meanFlowX, coop_sol.meanFlowY
    assert mX[0] == lq.x0
    # terminal mean adjoint tied to the terminal mean state
    assert mY[-1] == pytest.approx(2 * (lq.QT + lq.QbarT) * mX[-1], abs=1e-14)
    # backward mean equation: d mY/dt = -l2 at the means
    dmY = np.gradient(mY, g, edge_order=2)
    drv = eval_ell2(lq, mX, mY, MeasureSummary(mX, mY))
    assert np.max(np.abs(dmY + drv)) <= 1e-6


def test_planner_foc(lq, coop_sol):
    ens = simulate_planner(lq, coop_sol, BrownianBundle.generate(0, 16, 50, lq.T, reps=10))
    assert np.max(np.abs(planner_foc_residual(lq, coop_sol, ens))) <= 1e-12


def test_stationarity(lq, coop_sol):
    h = 0.1
    diff, curv = stationarity_check(lq, coop_sol, h=h)
    assert diff <= 1e-4 * h * h
    assert curv > 0
    diff2, _ = stationarity_check(lq, coop_sol, eta=lambda t: np.sin(7 * t) - 2, h=0.05)
    assert diff2 <= 1e-4 * 0.05**2


def test_coop_ldp_zero_spec():
    s = zero_lq(B=0.7, Bbar=0.2, A=0.1)
    rep = coop_ldp_experiment(s, [8, 16], 100, 0, functionals=[], K=200)
    tails = rep.select(kind="coop-tail")
    assert tails and all(r["estimate"] == 0.0 for r in tails)


def test_coop_ldp_coupling_bounded(lq):
    rep = coop_ldp_experiment(lq, [8, 32, 128], 100, 1, functionals=[], K=1000)
    stats = [r["estimate"] for r in rep.select(kind="coop-coupling")]
    assert max(stats) <= 1e-20
