"""Cross-domain few-shot classification with a pool of modulated embedding models."""

__version__ = "0.1.0"
