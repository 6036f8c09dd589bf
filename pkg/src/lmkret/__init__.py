"""Chunking-free long-context retrieval with per-sentence landmark embeddings."""

__version__ = "0.1.0"
