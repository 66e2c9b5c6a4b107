from .data import Batch, TripletExample, collate, load_dataset, make_batches
from .synth import CATEGORIES, CorpusConfig, ProductSpec, generate_corpus, render_image

__all__ = [
    "Batch",
    "CATEGORIES",
    "CorpusConfig",
    "ProductSpec",
    "TripletExample",
    "collate",
    "generate_corpus",
    "load_dataset",
    "make_batches",
    "render_image",
]
