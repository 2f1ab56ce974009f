"""evalblocks: cache-aware block pipeline for embedding-model evaluation."""

__version__ = "0.1.0"
