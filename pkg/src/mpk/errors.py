"""Exception hierarchy shared by all modules."""


class MPKError(Exception):
    """Base class for every error raised by the library."""


class SchemaError(MPKError):
    """A model document does not match the model JSON schema."""


class InvariantViolation(MPKError):
    """A model violates a structural invariant (sign pattern, row sums, mass)."""


class NonIntegerTime(MPKError):
    """A discrete-time model was asked for a fractional time."""


class SingularSystem(MPKError):
    """A resolvent system is numerically singular."""


class NegativeFunction(MPKError):
    """A nonnegative function was required."""


class HorizonTooShort(MPKError):
    """The tail term of the variation did not vanish within the horizon budget."""


class FamilyNotStable(MPKError):
    """A density family is not stable under the dual semigroup."""


class SupportGap(MPKError):
    """The supports of a density family do not cover the positive-mass states."""


class NotSubInvariant(MPKError):
    """The reference measure is not sub-invariant for the model."""


class InputNotInvariant(MPKError):
    """An input function was required to be invariant but is not."""


class NotMarkovian(MPKError):
    """A conservative (Markovian) model was required."""


class NotAuxiliary(MPKError):
    """The reference measure is not an auxiliary measure for the model."""


class MassLeak(MPKError):
    """The adjoint semigroup lost or created mass."""


class NoConvergence(MPKError):
    """An averaging schedule was exhausted before convergence."""


class InconsistentVerdict(MPKError):
    """Two routes to the same statement disagree."""


class PrecisionBudget(MPKError):
    """A Monte Carlo standard-error target is unreachable within the path budget."""
