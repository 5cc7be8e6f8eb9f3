"""Domain-randomized segmentation with pyramid consistency, on numpy."""

__version__ = "0.1.0"
