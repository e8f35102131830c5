"""Exception hierarchy shared by every module."""


class ACVError(Exception):
    """Base class for all package errors."""


class ConfigError(ACVError):
    """Invalid or unknown configuration."""


class DomainError(ACVError):
    """A hyperparameter or input lies outside its admissible domain."""


class EvaluationError(ACVError):
    """A model returned a non-finite value."""

    def __init__(self, message, point=None, index=None):
        super().__init__(message)
        self.point = point
        self.index = index


class ConstraintError(ACVError):
    """Sample-set cardinalities violate the relations of a sampling scheme."""


class DegenerateStatsError(ACVError):
    """Model statistics cannot be estimated (e.g. a constant column)."""

    def __init__(self, message, model_id=None):
        super().__init__(message)
        self.model_id = model_id


class SingularityError(ACVError):
    """The control-variate system cannot be solved even after jitter."""


class NumericalConsistencyError(ACVError):
    """A computed variance is negative beyond round-off."""


class AssemblyError(ACVError):
    """Model outputs required to form an estimator are missing."""


class InfeasibleBudgetError(ACVError):
    """The budget cannot pay for the minimal admissible allocation."""


class BudgetExhaustedError(ACVError):
    """The budget ran out part way through a pipeline stage."""

    def __init__(self, message, ledger=None):
        super().__init__(message)
        self.ledger = ledger
