"""Query-aware language-image fusion embeddings for product relevance."""

__version__ = "0.1.0"
