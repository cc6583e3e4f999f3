"""Language-derived appearance elements toolkit."""

__version__ = "0.1.0"
