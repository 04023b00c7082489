"""Exception hierarchy shared by all solvers."""


class MfgLdpError(Exception):
    """Base class for every error raised by this package."""


class SpecError(MfgLdpError, ValueError):
    """A game specification violates one of its invariants."""


class NonConvexHamiltonian(MfgLdpError):
    pass


class FieldDomainError(MfgLdpError, ValueError):
    pass


class NumericalFailure(MfgLdpError):
    """Base for failures of a numerical method on a valid input."""


class RiccatiBlowup(NumericalFailure):
    def __init__(self, t, value):
        self.t = t
        self.value = value
        super().__init__(f"Riccati coefficient reached {value:.3e} at t={t:.6g}")


class SingularStep(NumericalFailure):
    pass


class AnsatzMismatch(NumericalFailure):
    pass


class Explosion(NumericalFailure):
    pass


class NonConvergence(NumericalFailure):
    pass


class DegenerateEstimate(NumericalFailure):
    pass


class NonInvertible(NumericalFailure):
    pass


class DimensionMismatch(MfgLdpError, ValueError):
    pass


class EmptyMeasure(MfgLdpError, ValueError):
    pass


class SizeLimit(MfgLdpError, ValueError):
    pass


class GridMismatch(MfgLdpError, ValueError):
    pass


class SingularR(SpecError):
    pass


class AllZeroEvents(NumericalFailure):
    """Every tail-probability cell for a threshold recorded zero events."""
