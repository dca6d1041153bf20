"""Interaction-primitive annotation pipeline with pluggable VLM grounding."""

__version__ = "0.1.0"
