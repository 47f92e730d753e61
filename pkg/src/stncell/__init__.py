"""Joint cell localization and classification with a spatial transformer."""

__version__ = "0.1.0"
