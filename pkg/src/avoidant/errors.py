"""Exception types shared across the package."""


class AvoidantError(Exception):
    """Base class for all package errors."""


class ConfigError(AvoidantError):
    """Bad or inconsistent run configuration."""


class NonDivisibleScale(AvoidantError):
    """Requested child scale does not divide the parent scale."""


class ScaleTooLarge(AvoidantError):
    """Requested subcube is larger than its parent."""


class ScaleMismatch(AvoidantError):
    """Set algebra on stage sets with incompatible scales."""


class InvalidStageSet(AvoidantError):
    """Stage set invariant violated (overlap, unequal sides, out of box)."""


class DerivativeUnavailable(AvoidantError):
    """Derivative oracle cannot supply the requested order."""


class CertificateFailure(AvoidantError):
    """Sampled bound certificate came out non-positive."""


class CertificateViolation(AvoidantError):
    """Observed behaviour contradicts a declared/sampled certificate."""


class InfeasibleScale(AvoidantError):
    """Step parameters exceed the configured enumeration or precision budget."""


class PreconditionViolation(AvoidantError):
    """A counting-lemma precondition fails for the given inputs."""


class DomainViolation(AvoidantError):
    """Evaluation outside the function's admissible domain."""


class DeltaTooLarge(AvoidantError):
    """Margin delta is not below the subset-sum threshold."""


class EtaTooLarge(AvoidantError):
    """Interval length eta too large for the requested margin."""


class StageInfeasible(AvoidantError):
    """A construction stage cannot be executed within configured caps."""


class HistoryIncomplete(AvoidantError):
    """Construction history lacks records needed by an analysis."""


class TooManyTuples(AvoidantError):
    """Exhaustive enumeration would exceed the tuple guard."""


class ScaleTooFine(AvoidantError):
    """Requested analysis scale is below the stage resolution."""
