"""Exception types shared across the package.

Every error raised on purpose derives from SogvgError so callers can catch
package failures without swallowing programming errors.
"""


class SogvgError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SogvgError):
    """Caller handed a tensor, box, or sequence that violates a precondition."""


class ConfigError(SogvgError):
    """Config file or override could not be parsed or contains unknown keys."""


class GenerationError(SogvgError):
    """Scene or expression generation failed after bounded retries."""


class ManifestError(SogvgError):
    """Dataset manifest is missing, malformed, or has an unsupported version."""


class CheckpointError(SogvgError):
    """Checkpoint file is missing, malformed, or has an unsupported version."""


class NumericalError(SogvgError):
    """Training produced a non-finite value.

    Carries a diagnostics dict (batch indices, loss terms, alpha ranges) so the
    failure can be written to disk before aborting.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
