"""Life-trajectory triplet extraction from biography text."""

__version__ = "0.1.0"
