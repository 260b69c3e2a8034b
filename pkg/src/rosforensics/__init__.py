"""Forensics laboratory for a ROS-style publish/subscribe middleware.

A deliberately unauthenticated registry master, node processes that keep a
faithful TCP socket ledger, an attack CLI that silently unregisters nodes,
a LiME-format memory capture emulator, and a plugin-based analyzer that
detects the attack from the captured image alone.
"""

__version__ = "0.1.0"

from .graph import GraphState, NodeRef, TopicBinding, ValidationError
from .lime import LimeFormatError, MemoryImage
from .snapshot import ProcessSnapshot, SocketRecord, TcpState

__all__ = [
    "GraphState",
    "NodeRef",
    "TopicBinding",
    "ValidationError",
    "MemoryImage",
    "LimeFormatError",
    "ProcessSnapshot",
    "SocketRecord",
    "TcpState",
    "__version__",
]
