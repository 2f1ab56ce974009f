"""Reference external embedder plugin for the evalblocks block protocol."""

__version__ = "0.1.0"
