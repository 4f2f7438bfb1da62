"""Exception taxonomy shared across the package.

The CLI maps these onto its exit-code contract: config problems exit 2,
data problems exit 3, numerical failures exit 4.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class DataError(ValueError):
    """Input data is malformed or insufficient."""


class MaskDegeneracyError(ValueError):
    """A diagonal mask would leave an attention row with no unmasked entry."""


class MetricUndefinedError(ValueError):
    """A metric denominator is zero, so the metric value is undefined."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
