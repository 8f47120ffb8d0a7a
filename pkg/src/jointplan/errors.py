"""Exception types shared across the package."""


class JointPlanError(Exception):
    """Base class for all package errors."""


class ConfigurationError(JointPlanError, ValueError):
    """Invalid profile, options, route, or config file."""


class ShapeError(JointPlanError, ValueError):
    """Arrays or trajectories whose dimensions do not line up."""


class DomainError(JointPlanError, ValueError):
    """Inputs outside the mathematical domain of a function (e.g. non-probability rows)."""


class NumericError(JointPlanError, ArithmeticError):
    """Non-finite potentials, losses, or gradients."""


class CapacityError(JointPlanError):
    """State space too large for exact enumeration."""


class PlanningError(JointPlanError):
    """No finite-cost plan exists."""
