"""Generate-then-filter correction of false in-batch negatives.

Generation turns every product title into structured fields and every image
into a short caption.  It runs once over a corpus and is cached to JSONL.
Filtering compares those texts per batch and flips a label 0 -> 1 when the
pair looks like the same thing:

* query-product: mean of sim(query, caption_j) and sim(query, title_j) >= σ
* image-title:   sim(caption_i, title_j) >= σ
"""

from __future__ import annotations

import itertools
import json
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .corpus.data import Batch, TripletExample
from .corpus.synth import CATEGORIES, COLORS, render_clean
from .encoders import QueryLifeModel, Tokenizer
from .numerics import no_grad

CACHE_NAME = "genfilt.features.jsonl"
PAIR_KINDS = ("query-product", "image-title")
BACKENDS = ("model-embedding", "token-overlap")

TITLE_PROMPT = (
    "As a product search engine, please understand the input of the product title, extract the core word, "
    "material, brand, color, and model parameters from the title and provide structured output.\n"
    "The input title: {title}\n"
    "To solve the problem, please execute the following steps: Firstly, understand the input product title and "
    "extract the vocabulary that describes the main product  as the core word. Secondly, analyze the main "
    "material of the product and replace it with \"NULL\" if none is specified. Thirdly, analyze the brand of "
    "the product and replace it with \"NULL\" if none is specified. Firthly, analyze the color of the product "
    "and replace it with \"NULL\" if not specified. Finally, output the structured parsing results."
)
IMAGE_PROMPT = "Briefly summarize the items in the picture in a few words."


class GenerationError(RuntimeError):
    pass


@dataclass
class GeneratedFeatures:
    source_id: str
    core: str | None = None
    material: str | None = None
    brand: str | None = None
    color: str | None = None
    caption: str | None = None
    status: str = "ok"

    def __post_init__(self):
        for name in ("core", "material", "brand", "color", "caption"):
            if getattr(self, name) == "":
                raise ValueError(f"{name}: missing values are None, never the empty string")
        if self.status == "ok" and not self.core:
            raise ValueError("a generated record needs a core word")

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def title_text(self) -> str:
        return " ".join(v for v in (self.color, self.material, self.core, self.brand) if v)

    def to_json(self) -> dict:
        d = asdict(self)
        return {"id": d.pop("source_id"), "title_features": {k: d.pop(k) for k in ("core", "material", "brand", "color")},
                "image_caption": d.pop("caption"), "status": d.pop("status")}

    @classmethod
    def from_json(cls, d: dict) -> "GeneratedFeatures":
        tf = d.get("title_features") or {}
        return cls(d["id"], tf.get("core"), tf.get("material"), tf.get("brand"), tf.get("color"),
                   d.get("image_caption"), d.get("status", "ok"))


@dataclass
class GenFiltConfig:
    enabled: bool = True
    threshold: float = 0.9
    similarity_backend: str = "model-embedding"
    pair_kinds: tuple[str, ...] = PAIR_KINDS
    thresholds: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.pair_kinds = tuple(self.pair_kinds)
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("genfilt.threshold must lie in [0, 1]")
        if self.similarity_backend not in BACKENDS:
            raise ValueError(f"genfilt.similarity_backend must be one of {BACKENDS}")
        bad = set(self.pair_kinds) - set(PAIR_KINDS)
        if bad:
            raise ValueError(f"genfilt.pair_kinds has unknown kinds {sorted(bad)}")
        for k, v in self.thresholds.items():
            if k not in PAIR_KINDS:
                raise ValueError(f"genfilt.thresholds has unknown kind {k!r}")
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"genfilt.thresholds.{k} must lie in [0, 1]")

    def sigma(self, kind: str) -> float:
        return self.thresholds.get(kind, self.threshold)


# -------------------------------------------------------------- generators

class FeatureGenerator(Protocol):
    def title_features(self, title: str) -> dict: ...

    def caption(self, image: np.ndarray, image_path: str | None = None) -> str: ...


class SyntheticGenerator:
    """Deterministic stand-in for the language and captioning models.

    Titles are parsed against the corpus vocabulary up to the first category
    word (trailing keyword stuffing is ignored).  Captions come from the
    nearest noise-free prototype render, so they read only what the pixels show.
    """

    def __init__(self, categories: Sequence[str] | None = None, image_size: int = 16):
        self.categories = tuple(categories or CATEGORIES)
        self.materials = {v for c in self.categories for v in CATEGORIES[c].attributes.get("material", ())}
        self.brands = {b for c in self.categories for b in CATEGORIES[c].brands}
        self.params = {v for c in self.categories for a, vals in CATEGORIES[c].attributes.items()
                       if a not in ("color", "material", "pattern") for v in vals}
        self._protos: list[tuple[str, np.ndarray]] = []
        for c in self.categories:
            sch = CATEGORIES[c]
            keys = list(sch.image_attrs)
            for combo in itertools.product(*(sch.attributes[k] for k in keys)):
                attrs = dict(zip(keys, combo))
                words = [attrs[k] for k in keys if not (k == "pattern" and attrs[k] == "plain")]
                self._protos.append((" ".join([*words, c]), render_clean(c, attrs, image_size)))
        self._proto_stack = np.stack([p for _, p in self._protos])

    def title_features(self, title: str) -> dict:
        words = title.strip().lower().split()
        if not words:
            raise GenerationError("empty title")
        desc: list[str] = []
        core = None
        for w in words:
            if w in self.categories:
                core = w
                break
            desc.append(w)
        if core is None:
            raise GenerationError(f"no product word found in title {title!r}")
        pick = lambda pool: next((w for w in desc if w in pool), None)  # noqa: E731
        params = [w for w in desc if w in self.params]
        return {
            "core": " ".join([*params, core]),
            "material": pick(self.materials),
            "brand": pick(self.brands),
            "color": pick(COLORS),
        }

    def caption(self, image: np.ndarray, image_path: str | None = None) -> str:
        if image.shape[1:] != self._proto_stack.shape[2:]:
            raise GenerationError("image size differs from the prototype renders")
        d = ((self._proto_stack - image[None]) ** 2).reshape(len(self._protos), -1).sum(axis=1)
        return self._protos[int(np.argmin(d))][0]


class SubprocessGenerator:
    """Line-delimited JSON over a child process's stdin/stdout.

    Request: ``{"id", "kind": "title"|"image", "payload", "prompt"}``.
    Response: ``{"id", "features"|"caption", "status"}``.
    """

    def __init__(self, command: Sequence[str], timeout: float = 60.0):
        self.proc = subprocess.Popen(list(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1)
        self.timeout = timeout
        self._n = 0

    def _ask(self, kind: str, payload: str, prompt: str) -> dict:
        self._n += 1
        req = {"id": f"r{self._n}", "kind": kind, "payload": payload, "prompt": prompt}
        if self.proc.poll() is not None:
            raise GenerationError("generator process has exited")
        self.proc.stdin.write(json.dumps(req) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise GenerationError("generator closed its output")
        resp = json.loads(line)
        if resp.get("id") != req["id"] or resp.get("status") != "ok":
            raise GenerationError(f"generator failed on {req['id']}: {resp.get('status')}")
        return resp

    def title_features(self, title: str) -> dict:
        if not title.strip():
            raise GenerationError("empty title")
        return _normalise_fields(self._ask("title", title, TITLE_PROMPT.format(title=title))["features"])

    def caption(self, image: np.ndarray, image_path: str | None = None) -> str:
        if image_path is None:
            raise GenerationError("the external captioner needs an image file path")
        return self._ask("image", str(image_path), IMAGE_PROMPT)["caption"].strip().lower()

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=self.timeout)


def _normalise_fields(features: dict) -> dict:
    out = {}
    for k in ("core", "material", "brand", "color"):
        v = features.get(k)
        v = None if v is None or str(v).strip().upper() in ("", "NULL") else str(v).strip().lower()
        out[k] = v
    return out


def write_requests(examples: Iterable[TripletExample], path: str | Path) -> int:
    """File-pair mode, step 1: dump one title and one image request per product."""
    n = 0
    seen: set[str] = set()
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            if e.product_id in seen:
                continue
            seen.add(e.product_id)
            fh.write(json.dumps({"id": f"{e.product_id}:title", "kind": "title", "payload": e.title,
                                 "prompt": TITLE_PROMPT.format(title=e.title)}) + "\n")
            fh.write(json.dumps({"id": f"{e.product_id}:image", "kind": "image", "payload": e.image_path,
                                 "prompt": IMAGE_PROMPT}) + "\n")
            n += 2
    return n


def read_responses(path: str | Path) -> dict[str, GeneratedFeatures]:
    """File-pair mode, step 2: merge title and image responses per product.

    A product whose either response is missing or failed is marked ungenerated.
    """
    parts: dict[str, dict] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            pid, _, kind = r["id"].rpartition(":")
            parts.setdefault(pid, {})[kind] = r
    out = {}
    for pid, p in parts.items():
        t, i = p.get("title"), p.get("image")
        if not (t and i and t.get("status") == "ok" and i.get("status") == "ok"):
            out[pid] = GeneratedFeatures(pid, status="failed")
            continue
        fields = _normalise_fields(t["features"])
        if not fields["core"]:
            out[pid] = GeneratedFeatures(pid, status="failed")
            continue
        out[pid] = GeneratedFeatures(pid, **fields, caption=i["caption"].strip().lower())
    return out


def generate_features(example: TripletExample, generator: FeatureGenerator) -> GeneratedFeatures:
    """Features for one product; failures come back with status "failed"."""
    try:
        fields = _normalise_fields(generator.title_features(example.title))
        if not fields["core"]:
            raise GenerationError("no core word")
        caption = generator.caption(example.image, example.image_path).strip().lower() or None
        return GeneratedFeatures(example.product_id, **fields, caption=caption)
    except (GenerationError, ValueError, KeyError):
        return GeneratedFeatures(example.product_id, status="failed")


def precompute_features(
    datasets: Iterable[Sequence[TripletExample]],
    generator: FeatureGenerator,
    cache_path: str | Path | None = None,
) -> dict[str, GeneratedFeatures]:
    """Generate once per product id, optionally appending to a JSONL cache."""
    cache = load_feature_cache(cache_path) if cache_path and Path(cache_path).exists() else {}
    fresh = []
    for ds in datasets:
        for e in ds:
            if e.product_id not in cache:
                cache[e.product_id] = generate_features(e, generator)
                fresh.append(cache[e.product_id])
    if cache_path and fresh:
        with open(cache_path, "a", encoding="utf-8") as fh:
            for f in fresh:
                fh.write(json.dumps(f.to_json(), sort_keys=True) + "\n")
    return cache


def load_feature_cache(path: str | Path) -> dict[str, GeneratedFeatures]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                f = GeneratedFeatures.from_json(json.loads(line))
                out[f.source_id] = f
    return out


# -------------------------------------------------------------- similarity

def token_set(text: str) -> frozenset[str]:
    return frozenset(text.strip().lower().split())


def jaccard(a: str, b: str) -> float:
    sa, sb = token_set(a), token_set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


class SimilarityIndex:
    """Vectors for generated strings so that a batch of similarities is one matrix product.

    ``token-overlap``: multi-hot token sets, Jaccard in [0, 1].
    ``model-embedding``: the model's unit-norm text embeddings, cosine in [-1, 1].
    """

    def __init__(self, backend: str, model: QueryLifeModel | None = None, tokenizer: Tokenizer | None = None):
        if backend not in BACKENDS:
            raise ValueError(f"unknown similarity backend {backend!r}")
        if backend == "model-embedding" and (model is None or tokenizer is None):
            raise ValueError("the model-embedding backend needs a model and tokenizer")
        self.backend = backend
        self.model = model
        self.tokenizer = tokenizer
        self._vec: dict[str, np.ndarray] = {}
        self._words: dict[str, int] = {}

    def add(self, texts: Iterable[str], chunk: int = 256) -> None:
        todo = sorted({t for t in texts if t and t not in self._vec})
        if not todo:
            return
        if self.backend == "token-overlap":
            for t in todo:
                for w in token_set(t):
                    self._words.setdefault(w, len(self._words))
            for t in todo:
                self._vec[t] = np.array(sorted(self._words[w] for w in token_set(t)), dtype=np.int64)
            return
        with no_grad():
            for s in range(0, len(todo), chunk):
                part = todo[s:s + chunk]
                ids, mask = self.tokenizer.batch(part)
                _, z = self.model.encode_text(ids, mask)
                for t, v in zip(part, z.data.astype(np.float64)):
                    self._vec[t] = v

    def matrix(self, left: Sequence[str | None], right: Sequence[str | None]) -> np.ndarray:
        """Pairwise similarity; NaN where either side is missing."""
        self.add([t for t in (*left, *right) if t])
        out = np.full((len(left), len(right)), np.nan)
        li = [i for i, t in enumerate(left) if t]
        ri = [j for j, t in enumerate(right) if t]
        if not li or not ri:
            return out
        if self.backend == "model-embedding":
            a = np.stack([self._vec[left[i]] for i in li])
            b = np.stack([self._vec[right[j]] for j in ri])
            out[np.ix_(li, ri)] = np.clip(a @ b.T, -1.0, 1.0)
            return out
        width = len(self._words)
        a = np.zeros((len(li), width))
        b = np.zeros((len(ri), width))
        for r, i in enumerate(li):
            a[r, self._vec[left[i]]] = 1.0
        for r, j in enumerate(ri):
            b[r, self._vec[right[j]]] = 1.0
        inter = a @ b.T
        union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
        out[np.ix_(li, ri)] = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
        return out

    def similarity(self, a: str, b: str) -> float:
        return float(self.matrix([a], [b])[0, 0])


def pair_similarity(a: str | GeneratedFeatures, b: GeneratedFeatures, kind: str, index: SimilarityIndex) -> float:
    """Similarity of one pair: kind "Q-T", "Q-I" (a is a query string) or "I-T" (a is features)."""
    if kind not in ("Q-T", "Q-I", "I-T"):
        raise ValueError(f"unknown pair kind {kind!r}")
    if not b.ok or (isinstance(a, GeneratedFeatures) and not a.ok):
        raise GenerationError("cannot compare an ungenerated example")
    if kind == "I-T":
        if not isinstance(a, GeneratedFeatures):
            raise TypeError("I-T compares the caption of one product with the title of another")
        return index.similarity(a.caption, b.title_text())
    right = b.title_text() if kind == "Q-T" else b.caption
    return index.similarity(a, right)


@dataclass
class FilterStats:
    query_product_flips: int = 0
    image_title_flips: int = 0
    skipped_examples: int = 0


def filter_batch_labels(
    batch: Batch,
    features: dict[str, GeneratedFeatures],
    cfg: GenFiltConfig,
    index: SimilarityIndex,
) -> tuple[np.ndarray, np.ndarray, FilterStats]:
    """Corrected ``(qp_labels, it_labels)``; only ever flips 0 -> 1.

    Entries fixed by human annotation are left alone, as are pairs touching an
    example whose features were not generated.
    """
    qp = batch.qp_labels.copy()
    it = batch.it_labels.copy()
    stats = FilterStats()
    if not cfg.enabled:
        return qp, it, stats
    feats = [features.get(e.product_id) for e in batch.examples]
    good = np.array([f is not None and f.ok for f in feats])
    stats.skipped_examples = int((~good).sum())
    titles = [f.title_text() if ok else None for f, ok in zip(feats, good)]
    captions = [f.caption if ok else None for f, ok in zip(feats, good)]
    off_diag = ~np.eye(len(batch), dtype=bool)

    if "query-product" in cfg.pair_kinds and batch.has_queries:
        queries = [e.query for e in batch.examples]
        score = (index.matrix(queries, captions) + index.matrix(queries, titles)) / 2.0
        flip = (np.nan_to_num(score, nan=-np.inf) >= cfg.sigma("query-product")) & off_diag
        flip &= ~batch.annotated & (qp == 0)
        stats.query_product_flips = int(flip.sum())
        qp[flip] = 1
    if "image-title" in cfg.pair_kinds:
        # title i vs image j, scored by title_i text against caption_j
        score = index.matrix(titles, captions)
        flip = (np.nan_to_num(score, nan=-np.inf) >= cfg.sigma("image-title")) & off_diag & (it == 0)
        stats.image_title_flips = int(flip.sum())
        it[flip] = 1
    return qp, it, stats


def apply_filter(batch: Batch, features: dict[str, GeneratedFeatures], cfg: GenFiltConfig,
                 index: SimilarityIndex) -> Batch:
    """Replace the batch's label matrices with corrected ones (in place) and record stats."""
    batch.qp_labels, batch.it_labels, stats = filter_batch_labels(batch, features, cfg, index)
    batch.stats.update(asdict(stats))
    return batch
