"""Exception types shared across the package.

Kept deliberately flat: callers catch the class, messages carry the detail.
"""


class DimensionError(ValueError):
    """Shape or extent mismatch between operands."""


class NumericError(ValueError):
    """Invalid numeric state: NaN input, empty loss, non-finite result."""


class ParameterError(ValueError):
    """An argument is outside its documented domain."""


class DataError(ValueError):
    """Input data violates a contract (missing category, empty schedule...)."""


class StateError(RuntimeError):
    """Mutable state is inconsistent (missing gradient, duplicate name)."""


class DeterminismError(RuntimeError):
    """A function expected to be deterministic returned differing values."""


class AlignmentInfeasibleError(ValueError):
    """CTC target cannot be aligned: too few frames for the label sequence."""


class SizeError(ValueError):
    """Problem instance exceeds the documented brute-force budget."""


class BoundsError(IndexError):
    """Index outside the valid range."""


class ConfigError(ValueError):
    """Run configuration is malformed (unknown key, inconsistent sections)."""
