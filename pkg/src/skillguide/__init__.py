"""Projection-guided DIAYN skill discovery."""

__version__ = "0.1.0"
