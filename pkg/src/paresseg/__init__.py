"""Multi-phase liver tumor segmentation with phase attention on a numpy substrate."""

__version__ = "0.1.0"
