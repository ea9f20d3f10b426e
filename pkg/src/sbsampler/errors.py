"""Exception types shared across the package."""


class NotPositiveDefinite(ValueError):
    """A matrix required to be positive definite failed its factorization."""


class NotPsd(ValueError):
    """A matrix required to be positive semi-definite has a negative eigenvalue."""


class EmptyInput(ValueError):
    """An operation received an empty sequence."""


class OutOfRange(ValueError):
    """A time or schedule index is outside its valid range."""


class NonFiniteGradient(FloatingPointError):
    """A kernel drift evaluation produced a non-finite gradient."""


class TwistNotIntegrable(ValueError):
    """Twisting a Gaussian kernel produced a non-integrable (non-PD) precision.

    Signals that the policy grows too fast for conjugate twisting; callers
    typically clamp the quadratic coefficient and retry.
    """


class HessianNotUsable(ValueError):
    """Second-order twisting failed its positive-definiteness precondition."""


class SingularDesign(ValueError):
    """The regression normal equations are singular even after ridge."""


class DegenerateWeights(ValueError):
    """All candidate weights underflowed to zero in log-scale."""


class AllWeightsDegenerate(ValueError):
    """Every particle weight is zero; the ensemble carries no information."""

    def __init__(self, msg="all particle weights are degenerate", t=None):
        if t is not None:
            msg = f"{msg} (time index {t})"
        super().__init__(msg)
        self.t = t


class MalformedRow(ValueError):
    """A dataset row failed to parse; carries the offending row index."""

    def __init__(self, row_index, reason=""):
        super().__init__(f"malformed row {row_index}: {reason}")
        self.row_index = row_index


class DimensionMismatch(ValueError):
    """A loaded dataset does not have the documented shape."""


class SchemaError(ValueError):
    """An experiment configuration failed validation; carries the field path."""

    def __init__(self, field, reason):
        super().__init__(f"config field '{field}': {reason}")
        self.field = field


class UnknownExperiment(ValueError):
    """The requested experiment id is not registered."""
