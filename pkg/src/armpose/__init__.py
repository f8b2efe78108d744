"""Robot arm pose and joint-angle estimation from keypoint heatmaps."""

__version__ = "0.1.0"
