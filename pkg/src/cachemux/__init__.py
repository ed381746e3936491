"""Cost-aware caching and model multiplexing for inference serving."""

__version__ = "0.1.0"
