"""Adversarial multi-task interference detection and identification."""

__version__ = "0.1.0"
