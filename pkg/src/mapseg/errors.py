"""Exception types shared across the package."""


class MapSegError(Exception):
    """Base class for all package errors."""


class VolumeFormatError(MapSegError):
    """A volume file is missing, truncated, or malformed."""


class ConfigurationError(MapSegError):
    """A configuration value is invalid or inconsistent."""


class AccessFencedError(MapSegError, AssertionError):
    """Data was accessed inside a scope where its use is forbidden."""
