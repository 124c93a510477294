"""Bi-mask prunability search for toy vision transformers."""

__version__ = "0.1.0"
