import pytest

from mfgldp.coop import solve_coop
from mfgldp.mfg_solver import solve_decoupling_field, solve_mean_flow
from mfgldp.model import GeneralLQSpec, SystemicRiskSpec

ACCEPTANCE_LINES = []


def default_spec(**kw):
    p = dict(a=0.5, q=0.8, eps=1.0, c=0.5, sigma=1.0, T=0.5, x0=0.0)
    p.update(kw)
    return SystemicRiskSpec(**p)


def lq_spec(**kw):
    p = dict(A=0.2, Abar=0.1, B=1.0, Bbar=0.3, Q=0.5, Qbar=0.2, R=0.5, Rbar=0.25, Sbar=0.1,
             QT=0.5, QbarT=0.1, sigma=1.0, T=0.5, x0=1.0)
    p.update(kw)
    return GeneralLQSpec(**p)


def zero_lq(**kw):
    p = dict(A=0.0, Abar=0.0, B=1.0, Bbar=0.0, Q=0.0, Qbar=0.0, R=1.0, Rbar=0.0, Sbar=0.0,
             QT=0.0, QbarT=0.0, sigma=1.0, T=0.5, x0=0.0)
    p.update(kw)
    return GeneralLQSpec(**p)


@pytest.fixture(scope="session")
def spec():
    return default_spec()


@pytest.fixture(scope="session")
def field(spec):
    return solve_decoupling_field(spec, 4000)


@pytest.fixture(scope="session")
def flow(spec, field):
    return solve_mean_flow(spec, field)


@pytest.fixture(scope="session")
def lq():
    return lq_spec()


@pytest.fixture(scope="session")
def lq_field(lq):
    return solve_decoupling_field(lq, 4000)


@pytest.fixture(scope="session")
def coop_sol(lq):
    return solve_coop(lq, 4000)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
