"""Multiple-instance learning on histology tiles and survival validation of the classifier."""

__version__ = "0.1.0"
