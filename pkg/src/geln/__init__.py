"""Graph-ensemble multi-label classification over two-modality feature vectors."""

__version__ = "0.1.0"
