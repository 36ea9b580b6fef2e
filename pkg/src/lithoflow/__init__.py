"""Tool-augmented workflow for depth-aligned lithology sequence labeling."""

__version__ = "0.1.0"
