"""Attention alignment lab: diagonal attention constraints for transformer text-to-speech."""

__version__ = "0.1.0"
