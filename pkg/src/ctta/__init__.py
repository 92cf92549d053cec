"""Continual test-time adaptation on a small numpy autodiff core."""

from .errors import ConfigError, ContractError, ShapeError

__all__ = ["ConfigError", "ContractError", "ShapeError"]
__version__ = "0.1.0"
