"""Serve Hugging Face causal-LM logits over the NDJSON logit protocol."""

__version__ = "0.1.0"

from .server import Bridge, BridgeConfig, BridgeError, BridgeServer, ModelSlot, serve_stdio

__all__ = ["Bridge", "BridgeConfig", "BridgeError", "BridgeServer", "ModelSlot", "serve_stdio"]
