"""Corpus-to-embedding bridge emitting the LDAE container."""

__version__ = "0.1.0"

from .encode import BridgeConfig, BridgeError, bridge_encode  # noqa: F401
