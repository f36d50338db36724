"""Frequency-domain ultrasound tomography toolkit."""

__version__ = "0.1.0"
