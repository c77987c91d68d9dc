"""Thin client for the langnav episode wire protocol (version 1).

No environment logic lives here: frames, rewards and termination all come from
the server, either over TCP or from a server subprocess on standard streams.
"""
from .env import ProtocolError, RemoteEnv, connect

__all__ = ["RemoteEnv", "ProtocolError", "connect"]

__version__ = "0.1.0"
