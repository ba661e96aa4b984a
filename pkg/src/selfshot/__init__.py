"""Self-shot video instance segmentation on a synthetic moving-shapes benchmark."""

__version__ = "0.1.0"
