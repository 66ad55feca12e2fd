"""Capitation payment engine for primary healthcare claims."""

__version__ = "0.1.0"
