"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: ConfigError -> 2,
InvariantViolation/DimensionMismatch -> 3, NonConvergence -> 4.
"""
from __future__ import annotations


class DimensionMismatch(ValueError):
    """Operands with incompatible Hilbert-space dimensions."""


class InvariantViolation(RuntimeError):
    """A numerical contract was broken (norm, trace, leakage, residuals...)."""


class ConfigError(ValueError):
    """Bad experiment configuration (unknown key, wrong type, bad range)."""


class NonConvergence(RuntimeError):
    """An iterative solver hit its budget without meeting its tolerance."""
