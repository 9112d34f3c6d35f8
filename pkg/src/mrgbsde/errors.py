"""Exception hierarchy shared by every solver in the package."""


class MRGBSDEError(Exception):
    """Base class for all errors raised by this package."""


class CFLViolation(MRGBSDEError):
    """Explicit scheme would lose monotonicity or stability on this grid."""


class StabilityGuardViolation(MRGBSDEError):
    """Quadratic-in-z term too large for the explicit G-BSDE step."""


class NumericalBreakdown(MRGBSDEError):
    """A sweep produced non-finite values."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class UndefinedConstant(MRGBSDEError):
    """A derived volatility constant is undefined, e.g. sigma_tilde when sigma_low = 0."""


class BudgetExceeded(MRGBSDEError):
    """Enumeration or iteration would exceed the configured cost guard."""


class AssumptionViolation(MRGBSDEError):
    """Input data violates a structural assumption (monotonicity, separation, ...)."""

    def __init__(self, message: str, assumption: str | None = None):
        super().__init__(message if assumption is None else f"{assumption}: {message}")
        self.assumption = assumption


class InadmissibleAnchor(AssumptionViolation):
    """Terminal anchor violates l(T, a) <= 0 <= r(T, a)."""


class RootFindingError(MRGBSDEError):
    """Bisection did not bracket or did not converge."""


class GridMismatch(MRGBSDEError):
    """Two objects that must share a grid do not."""


class SchemeFailure(MRGBSDEError):
    """Recovered K is increasing beyond tolerance, or a similar internal inconsistency."""


class ContractionFailure(MRGBSDEError):
    """Fixed-point iteration is not contracting."""


class ConvergenceFailure(MRGBSDEError):
    """An iteration ran out of budget or a gap sequence stopped decreasing."""


class ConfigError(MRGBSDEError):
    """Experiment configuration could not be parsed or validated."""
