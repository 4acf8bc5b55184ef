"""Survival models trained with an X-CAL calibration penalty."""

__version__ = "0.1.0"
