"""Sparse mixture-of-experts engine with modality-aware load balancing and
enhanced expert activation for high-variance vision tokens, plus a synthetic
multimodal harness for studying routing distributions."""

__version__ = "0.1.0"
