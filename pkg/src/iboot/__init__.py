"""Video representation learning by distilling frozen per-frame image features."""

__version__ = "0.1.0"
