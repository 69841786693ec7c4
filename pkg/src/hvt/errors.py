"""Exception hierarchy shared across the package."""


class HvtError(Exception):
    """Base class for all package errors."""


class InvalidPrefixError(HvtError, ValueError):
    """A prefix handed to a model contains EOS or out-of-vocabulary ids."""


class ValidationError(HvtError, ValueError):
    """A model description, distribution, or input record failed validation."""


class ConfigError(HvtError, ValueError):
    """A run or benchmark configuration is unusable."""


class UndefinedPriorityError(HvtError, ValueError):
    """Priority was requested for the root of a draft tree."""


class BudgetError(HvtError, RuntimeError):
    """Exact enumeration would exceed its outcome budget."""
