"""Deterministic low-altitude UAV traffic simulation platform."""

__version__ = "0.1.0"
