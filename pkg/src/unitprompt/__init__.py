"""Prompt tuning of a frozen unit language model over discrete speech-like units."""

__version__ = "0.1.0"
