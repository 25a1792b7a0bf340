"""Exception hierarchy shared by every module."""


class LnPruneError(Exception):
    """Base class for all errors raised by the package."""


class ShapeError(LnPruneError, ValueError):
    """A tensor or layer had an incompatible shape.

    ``dim`` names the offending dimension, ``expected``/``actual`` carry the
    two extents when they are known.
    """

    def __init__(self, message, *, dim=None, expected=None, actual=None, layer=None):
        self.dim = dim
        self.expected = expected
        self.actual = actual
        self.layer = layer
        details = []
        if layer is not None:
            details.append(f"layer={layer}")
        if dim is not None:
            details.append(f"dim={dim}")
        if expected is not None or actual is not None:
            details.append(f"expected={expected} actual={actual}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)


class GraphError(LnPruneError, ValueError):
    """Malformed model graph (unknown layer, cycle, bad head pattern, ...)."""


class ModelFormatError(LnPruneError):
    """A model file could not be decoded."""


class DataError(LnPruneError):
    """Dataset files or dataset parameters are invalid."""


class PlanError(LnPruneError, ValueError):
    """A prune plan is inconsistent with the graph it targets."""


class TrainingDiverged(LnPruneError, ArithmeticError):
    """Loss became non-finite during training."""


class ConfigError(LnPruneError, ValueError):
    """Run configuration failed validation."""
