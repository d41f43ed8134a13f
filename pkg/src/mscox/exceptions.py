"""Exception and warning classes raised by :mod:`mscox`."""


class MultiStateError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(MultiStateError, ValueError):
    """Input data or configuration is malformed."""


class MissingColumn(ValidationError):
    pass


class InconsistentInterval(ValidationError):
    pass


class UnknownTransition(ValidationError):
    pass


class DuplicateStatusOne(ValidationError):
    pass


class IncompleteRiskPeriod(ValidationError):
    """A risk period does not carry one row per outbound transition."""


class SelfTransition(ValidationError):
    pass


class DuplicateTransition(ValidationError):
    pass


class NotTree(ValidationError):
    pass


class MissingTransitionRow(ValidationError):
    pass


class NumericalError(MultiStateError, ArithmeticError):
    """A numerical procedure failed."""


class EmptyRiskSet(NumericalError):
    pass


class SingularHessian(NumericalError):
    pass


class NegativeDiagonal(NumericalError):
    pass


class AllReplicatesFailed(NumericalError):
    pass


class NotConvergedWarning(RuntimeWarning):
    pass


class DegenerateGroupWarning(RuntimeWarning):
    pass


class HorizonBeyondData(UserWarning):
    pass


class ClippingWarning(RuntimeWarning):
    pass
