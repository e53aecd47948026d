"""Per-view CNN feature extraction for the view-set classifier."""

__version__ = "0.1.0"
