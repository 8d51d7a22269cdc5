"""Token-labeling training toolkit for small vision transformers."""

__version__ = "0.1.0"
