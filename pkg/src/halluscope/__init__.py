"""Hallucination monitoring toolkit for image-to-image translation models:
feature-based confidence scoring, self-tuning, and rejection-preference
evaluation."""

__version__ = "0.1.0"
