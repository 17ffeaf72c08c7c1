"""Size-targeted pruning, cost analysis and dataset profiling for YOLOv11-nano."""

__version__ = "0.1.0"
