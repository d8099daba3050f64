"""Exception types that map onto the CLI's exit codes."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class CalibrationError(RuntimeError):
    """No noise multiplier can satisfy the requested privacy budget (CLI exit code 3)."""


class DataError(ValueError):
    """Malformed dataset or model file (CLI exit code 4)."""
