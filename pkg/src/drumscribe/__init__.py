"""Tatum-level drum transcription toolkit."""

from .errors import ValidationError

__version__ = "0.1.0"

__all__ = ["ValidationError", "__version__"]
