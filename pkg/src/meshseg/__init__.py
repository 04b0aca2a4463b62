"""Two-stream graph convolutional mesh segmentation toolkit."""

__version__ = "0.1.0"
