"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataFormatError -> 3,
NumericError -> 4, OSError -> 5.
"""


class DistillCLError(Exception):
    pass


class ValidationError(DistillCLError, ValueError):
    """Bad arguments or contract violations (shapes, ranges, preconditions)."""


class DataFormatError(DistillCLError, ValueError):
    """Malformed on-disk data: bad magic numbers, truncation, out-of-range labels."""


class ChecksumError(DataFormatError):
    """Stored checksum does not match the payload."""


class ConfigError(DistillCLError, ValueError):
    """Invalid experiment configuration. `errors` lists every invalid field."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config: " + "; ".join(self.errors))


class NumericError(DistillCLError, RuntimeError):
    """Non-finite values encountered during optimization."""
