"""Self-supervised multimodal geospatial anomaly detection, desk scale."""

__version__ = "0.1.0"
