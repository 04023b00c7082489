import numpy as np
import pytest

from mfgldp.errors import FieldDomainError, RiccatiBlowup, SpecError
from mfgldp.grid import uniform_grid
from mfgldp.mfg_solver import (largest_safe_horizon, master_pde_residual, mfe_control, solve_decoupling_field,
                               solve_mean_flow, solve_mkv_fbsde_oracle)
from mfgldp.model import MeasureSummary, eval_lambda, quadratic
from mfgldp.particle import BrownianBundle, simulate_limit

from conftest import default_spec, lq_spec


def samples(T, n=100, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(0, T, n), rng.uniform(-3, 3, n), rng.uniform(-3, 3, n)])


def test_grid_needs_two_steps():
    with pytest.raises(SpecError):
        uniform_grid(1.0, 1)


def test_zero_cost_field_vanishes():
    s = default_spec(q=0.0, eps=0.0, c=0.0)
    f = solve_decoupling_field(s, 200)
    assert not np.any(f.p) and not np.any(f.r) and not np.any(f.s)
    assert np.all(master_pde_residual(s, f, samples(s.T)) == 0.0)
    flow = solve_mean_flow(s, f)
    assert mfe_control(s, f, flow, 0.2, 1.3) == 0.0


def test_terminal_condition(field, lq_field, lq):
    assert (field.p[-1], field.r[-1], field.s[-1]) == (0.5, -0.5, 0.0)
    # the equilibrium field of the non-cooperative game ends at d_x g, which has no mean part here
    assert (lq_field.p[-1], lq_field.r[-1], lq_field.s[-1]) == (2 * lq.QT, 0.0, 0.0)


def test_rk4_order():
    s = lq_spec(T=2.0)
    vals = [np.array(solve_decoupling_field(s, K).coefficients(0.0)) for K in (10, 20, 40)]
    e1, e2 = np.abs(vals[0] - vals[1]).max(), np.abs(vals[1] - vals[2]).max()
    assert 12 <= e1 / e2 <= 20
    a, b = (np.array(solve_decoupling_field(s, K).coefficients(0.0)) for K in (2000, 4000))
    assert np.abs(a - b).max() <= 1e-12


def test_blowup_and_safe_horizon():
    s = lq_spec(Q=-5.0, T=5.0)
    with pytest.raises(RiccatiBlowup) as e:
        solve_decoupling_field(s, 400)
    assert 0 <= e.value.t <= 5.0
    T_safe = largest_safe_horizon(lambda T: lq_spec(Q=-5.0, T=T), T_max=5.0)
    assert 0 < T_safe < 5.0
    solve_decoupling_field(lq_spec(Q=-5.0, T=0.9 * T_safe), 400)


def test_field_domain(field):
    with pytest.raises(FieldDomainError):
        field.coefficients(0.6)
    with pytest.raises(FieldDomainError):
        field.coefficients(-0.1)


def test_mean_flow_systemic(spec, field, flow):
    assert np.allclose(flow.mX, spec.x0, atol=1e-14)
    zero = default_spec(q=0.0, eps=0.0, c=0.0, x0=1.5)
    fz = solve_decoupling_field(zero, 100)
    assert np.all(solve_mean_flow(zero, fz).mX == 1.5)


def _euler_mean(f, x0, K):
    g = np.linspace(0, f.T, K + 1)
    bx, bm, b0 = f.drift_coefficients(g)
    m = x0
    h = f.T / K
    for k in range(K):
        m = m + h * ((bx[k] + bm[k]) * m + b0[k])
    return m


def test_mean_flow_against_fine_euler(lq, lq_field):
    flow = solve_mean_flow(lq, lq_field)
    assert abs(flow.mX[-1] - _euler_mean(lq_field, lq.x0, 10**5)) <= 1e-4
    # mA(T) is Lambda at the mean by affinity
    p, r, s = lq_field.coefficients(lq.T)
    m = flow.mX[-1]
    lam = eval_lambda(lq, lq.T, m, (p + r) * m + s, MeasureSummary(m))
    assert flow.mA[-1] == pytest.approx(lam, abs=1e-12)


def test_mean_flow_matches_limit_particles(lq, lq_field):
    flow = solve_mean_flow(lq, lq_field)
    b = BrownianBundle.generate(4, 10**5, 200, lq.T)
    X = simulate_limit(lq, lq_field, flow, b).states[:, -1]
    se = X.std() / np.sqrt(X.size)
    # Euler bias at K=200 is far below one standard error here
    assert abs(X.mean() - flow.mX[-1]) <= 3 * se
    assert abs(X.var() / flow.varX[-1] - 1) <= 0.03


def test_master_pde_residual(spec, field):
    res = master_pde_residual(spec, field, samples(spec.T))
    assert np.max(np.abs(res)) <= 1e-8
    end = np.array([[spec.T, 0.7, -1.1], [spec.T, -2.0, 0.4]])
    assert np.max(np.abs(master_pde_residual(spec, field, end))) <= 1e-12


def test_mfe_control_formula(spec, field, flow):
    for t, x in [(0.0, 0.3), (0.21, -1.0), (0.5, 2.0)]:
        p, r, s = field.coefficients(t)
        m = flow.mean_at(t)
        assert mfe_control(spec, field, flow, t, x) == pytest.approx(spec.q * (m - x) - (p * x + r * m + s))


def test_oracle_zero_and_terminal(spec):
    z = solve_mkv_fbsde_oracle(default_spec(q=0.0, eps=0.0, c=0.0), 50)
    assert not np.any(z.P) and not np.any(z.R) and not np.any(z.S)
    o = solve_mkv_fbsde_oracle(spec, 50)
    assert (o.P[-1], o.R[-1], o.S[-1]) == (spec.c, -spec.c, 0.0)


@pytest.mark.parametrize("which", ["systemic", "lq"])
def test_oracle_first_order(which, field, lq_field):
    s, f = (default_spec(), field) if which == "systemic" else (lq_spec(), lq_field)
    ref = np.array(f.coefficients(0.0))
    errs = []
    for K in (100, 200, 400):
        o = solve_mkv_fbsde_oracle(s, K)
        errs.append(np.abs(np.array([o.P[0], o.R[0], o.S[0]]) - ref).max())
    assert errs[0] * 100 <= 1.0  # C / K with C below 1
    for e1, e2 in zip(errs, errs[1:]):
        assert 1.6 <= e1 / e2 <= 2.4


def test_oracle_control_agreement(spec, field, flow):
    o = solve_mkv_fbsde_oracle(spec, 400)
    lx, ly, lm = quadratic(spec).lambda_coefficients()
    y = o.P[0] * spec.x0 + o.R[0] * o.mX[0] + o.S[0]
    a_oracle = lx * spec.x0 + ly * y + lm * o.mX[0]
    assert abs(a_oracle - mfe_control(spec, field, flow, 0.0, spec.x0)) <= 1.0 / 400


def test_lipschitz_reported(field):
    lx, lm = field.lipschitz()
    assert np.isfinite(lx) and np.isfinite(lm) and lx == pytest.approx(np.abs(field.p).max())


def test_field_csv(tmp_path, field):
    path = tmp_path / "f.csv"
    field.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,p,r,s,dp,dr,ds"
    assert len(lines) == field.K + 2
