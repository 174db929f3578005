"""Half-brain multi-task CNN for ischemic lesion detection on synthetic CT phantoms."""

__version__ = "0.1.0"
