"""Remote I/O sharing at the device-file boundary.

A client process uses devices hosted on a remote server as if they were
local: file operations are forwarded over a framed wire protocol, driver
reads of process memory are served from prefetched buffers, driver writes
ride home batched with the response, and memory-mapped buffers stay
coherent through a page-granular write-invalidate DSM.  Heartbeats detect
disconnection, after which the server cleans up all residuals and the
client falls back to a local device of the same class when one exists.

Runs are either fully deterministic over a simulated link or real over
TCP; see README.md for entry points.
"""

import logging
import os

from .client import Client, ClientConfig, HandleState, OpenError, RttEstimator, VirtualHandle
from .devices import AudioConfig, default_devices
from .dsm import DsmNode, PageState, Policy
from .errors import DisconnectedError, OpAborted, RioError, SessionClosed
from .kernel import RealKernel, SimKernel
from .server import Server, ServerConfig
from .testbed import LINK_PRESETS, SimWorld, link_preset
from .wire import LinkConfig, Message, SimulatedLink, decode_frame, encode_frame

__version__ = "0.1.0"

__all__ = [
    "AudioConfig", "Client", "ClientConfig", "DisconnectedError", "DsmNode",
    "HandleState", "LINK_PRESETS", "LinkConfig", "Message", "OpAborted",
    "OpenError", "PageState", "Policy", "RealKernel", "RioError",
    "RttEstimator", "Server", "ServerConfig", "SessionClosed", "SimKernel",
    "SimWorld", "SimulatedLink", "VirtualHandle", "decode_frame",
    "default_devices", "encode_frame", "link_preset",
]


def configure_logging_from_env(var: str = "RIO_LOG") -> None:
    """Set package log verbosity from an environment variable."""
    level = os.environ.get(var)
    if not level:
        return
    logging.basicConfig(format="%(asctime)s %(name)s %(levelname)s %(message)s")
    logging.getLogger("rio").setLevel(getattr(logging, level.upper(), logging.INFO))
