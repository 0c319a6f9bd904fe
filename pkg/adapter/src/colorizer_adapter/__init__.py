"""Stdio adapter exposing image colorization models over a binary protocol."""

from .server import ProtocolError, serve_loop
from .backends import fallback_colorize, load_model_backend

__version__ = "0.1.0"
__all__ = ["serve_loop", "ProtocolError", "fallback_colorize", "load_model_backend"]
