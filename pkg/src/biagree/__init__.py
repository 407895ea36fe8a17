"""Target-bidirectional agreement regularization for sequence-to-sequence models."""
__version__ = "0.1.0"
