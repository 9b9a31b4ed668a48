"""Exception types shared across the package."""


class ImpastoError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(ImpastoError):
    """A caller-supplied image, map, or tensor violates a precondition."""


class InvalidConfigError(ImpastoError):
    """A configuration value is out of its documented range."""


class UnsupportedOperationError(ImpastoError):
    """The guidance oracle does not advertise the requested capability."""


class InvalidOracleError(ImpastoError):
    """An oracle returned something unusable (non-finite, zero-norm, ...)."""


class OracleError(ImpastoError):
    """A remote oracle request failed (transport or server-side error)."""


class ProtectionAborted(ImpastoError):
    """A protection run died mid-loop; carries the trace built so far."""

    def __init__(self, message, trace=None, step=None):
        super().__init__(message)
        self.trace = trace or []
        self.step = step
