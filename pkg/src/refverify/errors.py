"""Exception hierarchy shared by every refverify module."""


class RefVerifyError(Exception):
    """Base class for all errors raised by refverify."""


class ConfigError(RefVerifyError):
    """Bad configuration, arguments or input files."""


class BackendError(RefVerifyError):
    """A detector or VLM backend failed."""


class TransportError(BackendError):
    """The backend could not be reached (after retries)."""


class ProtocolError(BackendError):
    """The backend answered, but not with something we understand."""

    def __init__(self, message: str, status: int | None = None, body: str = ""):
        super().__init__(message)
        self.status = status
        self.body = body


class ClassInferenceError(RefVerifyError):
    """The VLM did not yield a usable object class for the description."""


class RenderError(RefVerifyError):
    """Overlay rendering was asked to do something impossible."""
