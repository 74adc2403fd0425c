"""Exception hierarchy shared across the package."""


class SlideGCDError(Exception):
    """Base class for all package errors."""


class DimensionError(SlideGCDError, ValueError):
    pass


class ParameterError(SlideGCDError, ValueError):
    pass


class InputError(SlideGCDError, ValueError):
    pass


class StateError(SlideGCDError, RuntimeError):
    pass


class FormatError(SlideGCDError, ValueError):
    """Malformed bag, manifest or checkpoint file."""


class ConfigError(SlideGCDError, ValueError):
    pass


class TrainingError(SlideGCDError, RuntimeError):
    """Non-finite loss or gradient encountered during optimisation."""


class OracleError(SlideGCDError, ArithmeticError):
    pass


class GraphError(SlideGCDError, ValueError):
    """Invalid incidence structure (e.g. an isolated node)."""
