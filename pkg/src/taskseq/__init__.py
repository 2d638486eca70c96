"""Task-sequence complexity and heterogeneity versus catastrophic forgetting."""

__version__ = "0.1.0"
