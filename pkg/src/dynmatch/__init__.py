"""Dynamic two-sided matching of children and foster homes arriving over time."""

__version__ = "0.1.0"
