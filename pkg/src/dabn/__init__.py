"""Online domain-adaptive batch normalization for activity recognition."""

__version__ = "0.1.0"
