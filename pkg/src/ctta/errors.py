"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """A caller violated an API precondition (wrong architecture, missing grad, ...)."""


class ConfigError(ValueError):
    """Invalid user-facing configuration; the CLI maps this to exit code 2."""
