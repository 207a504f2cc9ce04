"""Exception types shared across the package."""


class SemclError(Exception):
    """Base class for all package-specific errors."""


class ManifestError(SemclError):
    """Raised when an embedding or dataset manifest is malformed."""


class ConfigError(SemclError):
    """Raised for invalid experiment configuration (split arithmetic, bad fields)."""


class ProtocolError(SemclError):
    """Raised when the continual-learning protocol is violated at runtime."""
