"""Uncertainty-aware candidate selection and replanning over pre-explored semantic maps."""

__version__ = "0.1.0"
