"""Mel-domain noise flooding against white-box attacks on a toy speech recognizer."""

__version__ = "0.1.0"
