class MapFormatError(ValueError):
    """Raised when a map file does not match the expected schema."""


class ConfigurationError(ValueError):
    """Raised for invalid strategy / criterion combinations."""


class GenerationError(ValueError):
    """Raised when a synthetic scene cannot be generated as requested."""
