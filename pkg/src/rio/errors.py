"""Exceptions shared across the stubs."""


class RioError(Exception):
    pass


class DisconnectedError(RioError):
    """The remote side is unreachable and no fallback can serve the call."""

    def __init__(self, device_class: str = "", detail: str = "") -> None:
        self.device_class = device_class
        super().__init__(detail or f"remote {device_class or 'device'} disconnected")


class SessionClosed(RioError):
    """The session was torn down while the operation was in flight."""


class OpAborted(RioError):
    """A file operation exceeded its copy-round budget or was cancelled."""
