"""Causal multi-touch attribution at desk scale."""

__version__ = "0.1.0"
