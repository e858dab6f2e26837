"""CLIP embedding sidecar: manifest in, MMEB shards out."""

__version__ = "0.1.0"
