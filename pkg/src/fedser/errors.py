"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration or shape contract was violated."""


class InputError(ValueError):
    """Input data was rejected (non-finite values, bad rates, unknown labels)."""


class FingerprintMismatch(ValueError):
    """Two parameter sets come from different architectures."""
