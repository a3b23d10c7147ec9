"""Evidential multimodal multi-instance survival prediction."""

__version__ = "0.1.0"
