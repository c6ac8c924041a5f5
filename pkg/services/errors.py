"""
Exception types shared by the simulation, estimation and learning services.
"""

from typing import Any, Dict, Optional


class ConfigurationError(ValueError):
    """Invalid or unreadable configuration; `key` names the offending entry."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (shapes, call order)."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or hit a singular system."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
