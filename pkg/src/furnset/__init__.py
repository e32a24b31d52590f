"""Furniture set retrieval: feature search plus context-aware re-ranking."""

__version__ = "0.1.0"
