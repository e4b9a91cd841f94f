"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError -> 3,
ContractViolation (and subclasses) -> 4.
"""


class ContractViolation(ValueError):
    """An input violates a documented precondition or invariant."""


class DegenerateBatchError(ContractViolation):
    """A batch cannot support the requested loss (e.g. no valid triple)."""


class NumericError(RuntimeError):
    """A computation produced non-finite values."""


class ConfigError(ValueError):
    """An experiment configuration failed schema validation."""
