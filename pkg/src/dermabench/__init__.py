"""Benign/malignant dermoscopy benchmark: data pipeline, backbone zoo, training and reports."""

__version__ = "0.1.0"
