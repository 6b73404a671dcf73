class MechanismLabError(Exception):
    """Base class for every error raised by the lab."""
    pass


class InvalidInstance(MechanismLabError):
    """A grid, prior table or utility violates an instance invariant."""
    pass


class ZeroMassEvent(MechanismLabError):
    """Conditioning event has prior mass 0."""
    pass


class EmptyOutcomeSpace(MechanismLabError):
    """No feasible allocation to choose from."""
    pass


class NoClosedForm(MechanismLabError):
    """Instance has no registered closed-form allocation."""
    pass


class ZeroReferenceMass(MechanismLabError):
    """KL reference distribution puts zero mass on some token."""
    pass


class NonPositiveAlpha(MechanismLabError):
    """Regularization weight must be strictly positive."""
    pass


class DivergenceUndefined(MechanismLabError):
    """Candidate distribution is not absolutely continuous w.r.t. the reference."""
    pass


class UnsupportedScenario(MechanismLabError):
    """Operation only exists for a specific registered scenario."""
    pass


class TransferRuleError(MechanismLabError):
    """Transfer rule used outside its contract (e.g. a draw passed to a message-driven rule)."""
    pass


class EstimatorUnavailable(MechanismLabError):
    """Estimator law cannot be evaluated for the requested configuration."""
    pass


class MissingSecondStageReport(MechanismLabError):
    """Leave-one-out transfer lacks a second-stage report from another agent."""
    pass


class BudgetExceeded(MechanismLabError):
    """Deviation search would exceed the configured evaluation budget."""
    pass


class MissingLipschitzConstant(MechanismLabError):
    """Regret bound needs Lipschitz constants that were not declared."""
    pass


class ConditionStarFails(MechanismLabError):
    """Posterior means coincide, so no impossibility witness exists.

    Carries the partially filled certificate record so callers can report it.
    """

    def __init__(self, message: str, record=None):
        super().__init__(message)
        self.record = record


class InvalidScenarioParameters(MechanismLabError):
    """Scenario parameters outside their documented ranges."""
    pass


class PreconditionFails(MechanismLabError):
    """Demo called on a profile that does not match its configuration."""
    pass


class ConfigError(MechanismLabError):
    """Experiment config is unreadable or fails validation."""
    pass


class NumericalError(MechanismLabError):
    """A computation produced a non-finite or inconsistent number."""
    pass
