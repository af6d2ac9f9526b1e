"""Dual-encoder retrieval training with noise-aware token masking and
template-diverse caption generation, small enough to run on a desk CPU."""

__version__ = "0.1.0"
