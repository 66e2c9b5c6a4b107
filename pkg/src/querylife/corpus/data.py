"""Loading JSONL triplets and collating them into batches."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ..encoders import Tokenizer
from .synth import load_image

STAGES = ("pairs", "clicks", "labeled", "eval")


@dataclass
class TripletExample:
    query: str | None
    title: str
    image: np.ndarray
    product_id: str
    stage: str
    label: int | None = None
    query_id: int | None = None
    noise_flags: tuple[str, ...] = ()
    category: str | None = None
    image_path: str | None = None
    index: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage in ("labeled", "eval") and self.label not in (0, 1):
            raise ValueError("labeled examples need label 0 or 1")
        if self.stage in ("pairs", "clicks") and self.label is not None:
            raise ValueError(f"{self.stage} examples carry no label")

    @property
    def positive(self) -> bool:
        return self.label != 0


def load_dataset(path: str | Path, image_cache: dict[str, np.ndarray] | None = None) -> list[TripletExample]:
    """Read one JSONL split; image paths resolve relative to the file's directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    cache = {} if image_cache is None else image_cache
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            r = json.loads(line)
            img_path = str(path.parent / r["image_path"])
            if img_path not in cache:
                cache[img_path] = load_image(img_path)
            out.append(TripletExample(
                query=r.get("query"),
                title=r["title"],
                image=cache[img_path],
                product_id=r["product_id"],
                stage=r["stage"],
                label=r.get("label"),
                query_id=r.get("query_id"),
                noise_flags=tuple(r.get("noise_flags", ())),
                category=r.get("category"),
                image_path=r["image_path"],
                index=i,
            ))
    return out


@dataclass
class Batch:
    """Collated examples plus two positive-pair label matrices.

    ``qp_labels[i, j] = 1`` means query i is relevant to product j;
    ``it_labels[i, j] = 1`` means title i and image j depict the same product.
    ``annotated`` marks query-product entries fixed by human labels.
    """

    examples: list[TripletExample]
    title_ids: np.ndarray
    title_mask: np.ndarray
    images: np.ndarray
    query_ids: np.ndarray | None
    query_mask: np.ndarray | None
    qp_labels: np.ndarray
    it_labels: np.ndarray
    annotated: np.ndarray
    stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def stage(self) -> str:
        return self.examples[0].stage

    @property
    def has_queries(self) -> bool:
        return self.query_ids is not None


def initial_labels(examples: Sequence[TripletExample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Label matrices before any false-negative correction.

    Rows of the same product share title/image positives; a positive
    (query, product) row is also positive for other rows carrying that product.
    Labeled rows are authoritative on every entry touching their own product.
    """
    pid = np.array([e.product_id for e in examples])
    same = pid[:, None] == pid[None, :]
    pos = np.array([e.positive for e in examples])
    it = same.astype(np.int8)
    qp = (same & pos[:, None]).astype(np.int8)
    labeled = np.array([e.label is not None for e in examples])
    annotated = same & labeled[:, None]
    return qp, it, annotated


def collate(examples: Sequence[TripletExample], tokenizer: Tokenizer, dtype=np.float32) -> Batch:
    examples = list(examples)
    if not examples:
        raise ValueError("cannot collate an empty batch")
    stages = {e.stage for e in examples}
    if len(stages) != 1:
        raise ValueError(f"batch mixes stages {sorted(stages)}")
    title_ids, title_mask = tokenizer.batch([e.title for e in examples])
    has_q = all(e.query for e in examples)
    query_ids = query_mask = None
    if has_q:
        query_ids, query_mask = tokenizer.batch([e.query for e in examples])
    images = np.stack([e.image for e in examples]).astype(dtype)
    qp, it, annotated = initial_labels(examples)
    return Batch(examples, title_ids, title_mask, images, query_ids, query_mask, qp, it, annotated)


def make_batches(
    dataset: Sequence[TripletExample],
    batch_size: int,
    seed: int,
    drop_last: bool = True,
    epoch: int = 0,
    tokenizer: Tokenizer | None = None,
    contrastive: bool = True,
    dtype=np.float32,
) -> Iterator[Batch]:
    """Seeded per-epoch shuffle, then collate consecutive slices."""
    if contrastive and batch_size < 2:
        raise ValueError("batch_size must be >= 2 when in-batch negatives are used")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if tokenizer is None:
        raise ValueError("make_batches needs a tokenizer")
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < batch_size and (drop_last or (contrastive and len(idx) < 2)):
            break
        yield collate([dataset[i] for i in idx], tokenizer, dtype)


def num_batches(n: int, batch_size: int, drop_last: bool = True) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)
