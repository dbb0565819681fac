"""Exception hierarchy shared by the host and worker sides."""


class NodedevError(Exception):
    """Base class for every error raised by this package."""


class ProtocolError(NodedevError):
    """A malformed frame, or evidence that host and device tables diverged."""


class MalformedPayloadError(ProtocolError):
    """A frame payload does not match its tag's layout."""


class TruncatedStreamError(ProtocolError):
    """The byte stream ended in the middle of a frame."""


class StreamClosedError(ProtocolError):
    """The byte stream ended cleanly at a frame boundary."""


class TransportError(NodedevError):
    """A connection died, or a reply did not arrive within the timeout."""


class OffloadError(NodedevError):
    """A device reported a failing kernel execution."""

    def __init__(self, device_index: int, status: int, message: str = ""):
        detail = f": {message}" if message else ""
        super().__init__(f"kernel failed on device {device_index} with status {status}{detail}")
        self.device_index = device_index
        self.status = status


class BootstrapError(NodedevError):
    """Worker spawning or the startup handshake failed."""


class ConfigError(BootstrapError):
    """The cluster configuration file could not be parsed."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"config line {line_no}: {message}")
        self.line_no = line_no


class DigestMismatchError(BootstrapError):
    """kerneltable divergence: a worker registered different kernels than the host."""
