"""Camera-adversarial clustering-based unsupervised person re-ID."""

__version__ = "0.1.0"
