"""Exception types shared across the package."""


class ZoforgeError(Exception):
    """Base class for all package errors."""


class ShapeError(ZoforgeError):
    """Layer shapes do not compose, or an input does not match the model."""


class NumericsError(ZoforgeError):
    """A non-finite value appeared where finite math was expected."""


class UnsupportedLayerError(ZoforgeError):
    """The analytic gradient path does not cover this layer type."""


class StaleCacheError(ZoforgeError):
    """A feature cache was reused with parameters that differ below the reuse point."""


class CoordinateError(ZoforgeError):
    """A coordinate index set violates its contract (range, order, duplicates)."""


class StabilityError(ZoforgeError):
    """An explicit time step violates the stability bound of the scheme."""


class ConfigError(ZoforgeError):
    """A run configuration is malformed or inconsistent."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
