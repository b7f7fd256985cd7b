"""Impression-controllable zero-shot TTS on a synthetic speech corpus."""

__version__ = "0.1.0"
