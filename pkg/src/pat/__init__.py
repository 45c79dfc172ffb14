"""Position-aware transformer for dense multi-label action detection."""

__version__ = "0.1.0"
