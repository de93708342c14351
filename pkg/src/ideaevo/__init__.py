"""Evolutionary multi-agent research ideation."""

__version__ = "0.1.0"
