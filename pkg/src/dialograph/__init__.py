"""Relational dialogue-graph attention and adaptive pseudo-labeling."""

__version__ = "0.1.0"
