import itertools
from dataclasses import replace

import numpy as np
import pytest

from mfgldp.errors import AnsatzMismatch, DimensionMismatch, SpecError
from mfgldp.nplayer import (adjoint_row_sums, brute_force_discrete_nash, check_ansatz, compare_with_brute_force,
                            compute_residuals, foc_residual, loglog_slope, solve_nplayer_nash, write_residual_csv)
from mfgldp.particle import BrownianBundle, simulate_equilibrium

from conftest import default_spec, lq_spec


def test_zero_cost():
    s = default_spec(q=0.0, eps=0.0, c=0.0)
    nf = solve_nplayer_nash(s, 3, 100)
    assert not np.any(nf.coef)
    assert all(not np.any(v) for v in nf.feedback_coefficients(nf.grid))
    maps = brute_force_discrete_nash(default_spec(q=0.0, eps=0.0, c=0.0), 2, 20)
    assert not np.any(maps.M) and not np.any(maps.n)


def test_needs_two_players(spec):
    with pytest.raises(SpecError):
        solve_nplayer_nash(spec, 1)
    with pytest.raises(SpecError):
        brute_force_discrete_nash(spec, 6, 10)


def test_ansatz_check_detects_bad_coefficients(spec):
    nf = solve_nplayer_nash(spec, 4, 200)
    assert check_ansatz(nf) <= 1e-9
    bad = replace(nf, coef=nf.coef * 1.01, increments=None)
    with pytest.raises(AnsatzMismatch):
        check_ansatz(bad)


@pytest.mark.parametrize("mk", [default_spec, lq_spec])
def test_large_N_limit(mk):
    from mfgldp.mfg_solver import solve_decoupling_field

    s = mk()
    f = solve_decoupling_field(s, 1000)
    ref = np.array(f.coefficients(0.0))
    Ns = [2**k for k in range(4, 11)]
    errs = []
    for N in Ns:
        c = solve_nplayer_nash(s, N, 1000).coefficients(0.0)
        errs.append(np.abs(np.array([c["a"], c["b"], c["e"]]) - ref).max())
    errs = np.array(errs)
    assert -1.2 <= loglog_slope(Ns, errs) <= -0.8
    assert errs[-1] <= 10.0 / Ns[-1]


@pytest.mark.parametrize("mk", [default_spec, lq_spec])
def test_brute_force_two_players(mk):
    s = mk()
    e = [compare_with_brute_force(solve_nplayer_nash(s, 2, K), brute_force_discrete_nash(s, 2, K))
         for K in (50, 100, 200)]
    assert e[-1] <= 1.0 / 200
    for a, b in zip(e, e[1:]):
        assert 1.6 <= a / b <= 2.4


def test_brute_force_exchangeable_shape():
    s = lq_spec()
    N = 4
    maps = brute_force_discrete_nash(s, N, 50)
    for perm in itertools.permutations(range(N)):
        p = np.array(perm)
        assert np.allclose(maps.M[:, p][:, :, p][:, :, :, p], maps.M, rtol=0, atol=1e-12)
        assert np.allclose(maps.n[:, p][:, :, p], maps.n, rtol=0, atol=1e-12)
    # off-diagonal rows: every coefficient outside {i, j} is the same
    M = maps.M[0]
    for i, j in itertools.permutations(range(N), 2):
        rest = [l for l in range(N) if l not in (i, j)]
        assert np.ptp(M[i, j, rest]) <= 1e-12


def test_brute_force_off_diagonal_scaling(spec):
    # off-diagonal maps are (coefficients)/N with coefficients converging in N;
    # at N <= 5 the (N - 1)/N factor of the systemic-risk entries flattens the fit
    Ns = [2, 3, 4, 5]
    mags = []
    for N in Ns:
        M = brute_force_discrete_nash(spec, N, 100).M[0]
        mags.append(np.abs(M[0, 1]).max())
    mags = np.array(mags)
    assert np.all(np.diff(mags) < 0)
    assert loglog_slope(Ns, mags) < -0.5
    assert np.all(np.array(Ns) * mags <= 0.25)


def test_residuals_and_foc(spec):
    nf = solve_nplayer_nash(spec, 16, 500)
    b = BrownianBundle.generate(0, 16, 50, spec.T, reps=20)
    ens = simulate_equilibrium(spec, nf, b)
    res = compute_residuals(spec, nf, ens)
    assert np.all(res.zeta == 0.0)
    assert res.eps.shape == ens.states.shape and res.gamma.shape == ens.states.shape[:-1]
    assert np.max(np.abs(foc_residual(spec, nf, ens))) <= 1e-9
    with pytest.raises(DimensionMismatch):
        compute_residuals(spec, solve_nplayer_nash(spec, 8, 100), ens)


def test_lq_zeta_nonzero_and_foc(lq):
    nf = solve_nplayer_nash(lq, 8, 500)
    ens = simulate_equilibrium(lq, nf, BrownianBundle.generate(0, 8, 50, lq.T, reps=5))
    assert np.max(np.abs(compute_residuals(lq, nf, ens).zeta)) > 0
    assert np.max(np.abs(foc_residual(lq, nf, ens))) <= 1e-9


def test_row_sums_bounded(spec):
    stats = []
    for N in (8, 32, 128):
        nf = solve_nplayer_nash(spec, N, 500)
        ens = simulate_equilibrium(spec, nf, BrownianBundle.generate(1, N, 50, spec.T, reps=50))
        # per-player sup over time, averaged over players and replications
        stats.append(np.mean(np.max(adjoint_row_sums(nf, ens), axis=-1)))
    # bounded and settling: the statistic approaches its limit from below
    assert max(stats) <= 1.0
    assert abs(stats[2] - stats[1]) < abs(stats[1] - stats[0])


def test_row_sums_match_full_matrix(lq):
    nf = solve_nplayer_nash(lq, 5, 100)
    ens = simulate_equilibrium(lq, nf, BrownianBundle.generate(2, 5, 10, lq.T))
    rs = adjoint_row_sums(nf, ens)
    for k in (0, 5, 10):
        Y = nf.adjoint_matrix(ens.grid[k], ens.states[:, k])
        assert np.allclose(rs[:, k], np.abs(Y).sum(axis=1), atol=1e-13)


def test_residual_csv(tmp_path):
    write_residual_csv(tmp_path / "r.csv", [[8, 0.1, 0.0, 0.2, -1.0]])
    assert (tmp_path / "r.csv").read_text().splitlines() == ["N,max_eps,max_zeta,max_gamma,fitted_slope",
                                                             "8,0.1,0.0,0.2,-1.0"]
