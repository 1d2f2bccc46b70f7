"""Tree-based regression with explainability-driven feature pruning."""

__version__ = "0.1.0"
