"""Exception hierarchy shared across the package."""


class VitLatError(Exception):
    """Base class for all package errors."""


class ConfigurationError(VitLatError):
    """Search space, device model or hyperparameters are inconsistent."""


class LoweringError(VitLatError):
    """An architecture cannot be lowered to an operation graph."""


class UnsupportedOpError(VitLatError):
    """No FLOPs/feature rule exists for an operation kind."""


class DataError(VitLatError):
    """Malformed, duplicate or out-of-domain measurement data."""


class SchemaError(VitLatError):
    """Feature schema or serialized document does not match what is expected."""


class CoverageError(VitLatError):
    """A predictor bundle has no model for some operation kinds."""

    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__("no predictor for kind keys: " + ", ".join(self.missing))


class ContextMismatchError(VitLatError):
    """Predictor bundle and measurements come from different contexts."""


class UnsupportedMethodError(VitLatError):
    """Operation is not defined for the requested learning method."""
