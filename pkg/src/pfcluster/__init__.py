"""In-context clustering with a prior-fitted transformer."""

__version__ = "0.1.0"
