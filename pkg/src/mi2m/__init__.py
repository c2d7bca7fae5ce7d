"""Masked WiFi-vision modeling for multimodal human activity recognition."""

__version__ = "0.1.0"
