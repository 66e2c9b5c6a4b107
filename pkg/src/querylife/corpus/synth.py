"""Procedural <query, title, image> corpus.

Each category routes its attributes to modalities: a dress shows colour and
pattern only in its picture, a phone states everything only in its title, a
monitor splits them.  That routing is the knob that makes fusion measurable:
a query about a dress colour cannot be answered from the title alone.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.12, 0.12),
    "green": (0.12, 0.78, 0.20),
    "blue": (0.15, 0.28, 0.92),
    "yellow": (0.92, 0.86, 0.12),
    "purple": (0.58, 0.18, 0.80),
    "white": (0.96, 0.96, 0.96),
    "black": (0.06, 0.06, 0.06),
}
BACKGROUND = (0.45, 0.45, 0.45)
FILLERS = ("new", "official", "hot", "sale", "quality", "2024", "genuine")
STUFFING = ("best", "cheap", "free-shipping", "original", "promo", "trending")


@dataclass(frozen=True)
class CategorySchema:
    name: str
    attributes: dict[str, tuple[str, ...]]
    title_attrs: tuple[str, ...]
    image_attrs: tuple[str, ...]
    query_attrs: tuple[str, ...]
    brands: tuple[str, ...]

    def routing(self) -> dict[str, tuple[str, ...]]:
        return {"title": self.title_attrs, "image": self.image_attrs}


CATEGORIES: dict[str, CategorySchema] = {
    "dress": CategorySchema(
        name="dress",
        attributes={
            "color": ("red", "green", "blue", "yellow", "purple", "white"),
            "pattern": ("plain", "striped", "checked"),
            "material": ("cotton", "silk", "linen", "denim"),
        },
        title_attrs=("material",),
        image_attrs=("color", "pattern"),
        query_attrs=("color", "pattern"),
        brands=("belle", "mira", "orla", "sena"),
    ),
    "monitor": CategorySchema(
        name="monitor",
        attributes={
            "color": ("black", "white", "red", "blue"),
            "screen": ("24in", "27in", "32in"),
            "refresh": ("60hz", "144hz", "240hz"),
        },
        title_attrs=("screen", "refresh"),
        image_attrs=("color",),
        query_attrs=("color", "screen", "refresh"),
        brands=("vistek", "optima", "lumex", "dyno"),
    ),
    "phone": CategorySchema(
        name="phone",
        attributes={
            "color": ("black", "white", "blue", "red", "green"),
            "storage": ("64gb", "128gb", "256gb"),
            "network": ("4g", "5g"),
        },
        title_attrs=("color", "storage", "network"),
        image_attrs=(),
        query_attrs=("color", "storage", "network"),
        brands=("nova", "pixo", "zenta", "kairo"),
    ),
}


def vocabulary(categories: Sequence[str] | None = None) -> list[str]:
    """Every word the generator can emit, in a fixed order."""
    words: list[str] = []
    for name in categories or list(CATEGORIES):
        sch = CATEGORIES[name]
        words.append(sch.name)
        for values in sch.attributes.values():
            words.extend(values)
        words.extend(sch.brands)
    words.extend(FILLERS)
    words.extend(STUFFING)
    seen: dict[str, None] = {}
    for w in words:
        seen.setdefault(w, None)
    return list(seen)


@dataclass(frozen=True)
class ProductSpec:
    product_id: str
    category: str
    attrs: dict[str, str]
    brand: str

    @property
    def schema(self) -> CategorySchema:
        return CATEGORIES[self.category]

    def expressed(self, modality: str) -> dict[str, str]:
        keys = self.schema.title_attrs if modality == "title" else self.schema.image_attrs
        return {k: self.attrs[k] for k in keys}


# ----------------------------------------------------------------- rendering

def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size
    v, u = np.meshgrid(c, c, indexing="ij")
    return u, v


def shape_mask(category: str, size: int) -> np.ndarray:
    u, v = _grid(size)
    if category == "dress":
        half = 0.10 + 0.30 * np.clip((v - 0.10) / 0.82, 0, 1)
        return (v >= 0.10) & (v <= 0.92) & (np.abs(u - 0.5) <= half)
    if category == "monitor":
        body = (u >= 0.06) & (u <= 0.94) & (v >= 0.12) & (v <= 0.68)
        stand = (np.abs(u - 0.5) <= 0.07) & (v > 0.68) & (v <= 0.84)
        base = (np.abs(u - 0.5) <= 0.22) & (v > 0.84) & (v <= 0.92)
        return body | stand | base
    if category == "phone":
        return (u >= 0.31) & (u <= 0.69) & (v >= 0.05) & (v <= 0.95)
    raise ValueError(f"unknown category {category!r}")


def _screen_mask(category: str, size: int) -> np.ndarray:
    u, v = _grid(size)
    if category == "monitor":
        return (u >= 0.16) & (u <= 0.84) & (v >= 0.22) & (v <= 0.58)
    if category == "phone":
        return (u >= 0.38) & (u <= 0.62) & (v >= 0.14) & (v <= 0.84)
    return np.zeros((size, size), dtype=bool)


def render_clean(category: str, attrs: dict[str, str], size: int = 16) -> np.ndarray:
    """Noise-free picture (C, H, W) in [0, 1] for the image-expressed attributes."""
    sch = CATEGORIES[category]
    img = np.empty((3, size, size))
    img[:] = np.array(BACKGROUND)[:, None, None]
    mask = shape_mask(category, size)
    color = COLORS[attrs["color"]] if "color" in sch.image_attrs else (0.70, 0.70, 0.74)
    body = np.array(color)[:, None, None] * np.ones((1, size, size))
    pattern = attrs.get("pattern", "plain") if "pattern" in sch.image_attrs else "plain"
    rows, cols = np.indices((size, size))
    band = max(1, size // 8)
    if pattern == "striped":
        body = np.where((rows // band) % 2 == 1, body * 0.4, body)
    elif pattern == "checked":
        body = np.where(((rows // band) + (cols // band)) % 2 == 1, body * 0.4, body)
    img = np.where(mask, body, img)
    screen = _screen_mask(category, size)
    img = np.where(screen, np.array((0.10, 0.12, 0.20))[:, None, None], img)
    return img


def render_image(spec: ProductSpec, seed: int, size: int = 16, noise: float = 0.04) -> np.ndarray:
    """Seeded render quantised to 8-bit levels so PNG storage is lossless."""
    img = render_clean(spec.category, spec.attrs, size)
    rng = np.random.default_rng([seed, _stable_int(spec.product_id)])
    img = img + noise * rng.standard_normal(img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _stable_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


# ------------------------------------------------------------ text builders

def compose_title(spec: ProductSpec, rng: np.random.Generator, noise_rate: float,
                  title_leak: float = 0.0) -> tuple[str, list[str]]:
    """Brand, title-routed attributes, category word, fillers.

    Each image-routed attribute is also named with probability ``title_leak``.
    """
    sch = spec.schema
    desc = [spec.attrs[a] for a in sch.title_attrs]
    desc += [spec.attrs[a] for a in sch.image_attrs if a not in sch.title_attrs and rng.random() < title_leak]
    rng.shuffle(desc)
    flags: list[str] = []
    if noise_rate > 0 and rng.random() < noise_rate / 4:
        # a wrong colour word in the description proper
        wrong = [c for c in COLORS if c != spec.attrs.get("color")]
        desc.insert(int(rng.integers(0, len(desc) + 1)), str(rng.choice(wrong)))
        flags.append("misleading")
    words = [spec.brand, *desc, spec.category]
    words += list(rng.choice(FILLERS, size=int(rng.integers(0, 3)), replace=False))
    if noise_rate > 0 and rng.random() < noise_rate:
        pool = [c for c in CATEGORIES if c != spec.category] + list(COLORS) + list(STUFFING)
        words += list(rng.choice(pool, size=int(rng.integers(2, 5)), replace=False))
        flags.append("keyword_stuffed")
    return " ".join(words), flags


def compose_query(spec: ProductSpec, rng: np.random.Generator, min_attrs: int = 0) -> tuple[str, list[str]]:
    """Category word plus 0-2 queryable attribute values (always >= ``min_attrs``)."""
    qa = list(spec.schema.query_attrs)
    k = int(rng.integers(min_attrs, min(2, len(qa)) + 1))
    chosen = [str(a) for a in rng.choice(qa, size=k, replace=False)] if k else []
    words = [spec.attrs[a] for a in chosen]
    rng.shuffle(words)
    return " ".join([*words, spec.category]), chosen


# ------------------------------------------------------------------ records

@dataclass
class CorpusConfig:
    seed: int = 0
    counts: tuple[int, int, int] = (5000, 2000, 1000)
    eval_count: int = 1000
    noise_rate: float = 0.1
    image_size: int = 16
    image_noise: float = 0.04
    categories: tuple[str, ...] = ("dress", "monitor", "phone")
    category_mix: tuple[float, ...] | None = None
    click_catalog: int = 400
    image_format: str = "png"
    pair_title_leak: float = 0.5
    title_leak: float = 0.0

    def validate(self) -> None:
        if len(self.counts) != 3 or min(self.counts) < 1 or self.eval_count < 2:
            raise ValueError("corpus.counts must be three positive integers; eval_count >= 2")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("corpus.noise_rate must lie in [0, 1]")
        if not self.categories or any(c not in CATEGORIES for c in self.categories):
            raise ValueError(f"corpus.categories must be drawn from {sorted(CATEGORIES)}")
        if self.category_mix is not None:
            mix = self.category_mix
            if len(mix) != len(self.categories) or min(mix) < 0 or sum(mix) <= 0:
                raise ValueError("corpus.category_mix must give one non-negative weight per category")
        if self.image_size % 4 or self.image_size < 8:
            raise ValueError("corpus.image_size must be a multiple of 4 and >= 8")
        if self.image_format not in ("png", "npy"):
            raise ValueError("corpus.image_format must be 'png' or 'npy'")
        for name in ("pair_title_leak", "title_leak"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"corpus.{name} must lie in [0, 1]")
        if self.click_catalog < 1:
            raise ValueError("corpus.click_catalog must be positive")


@dataclass
class _Builder:
    cfg: CorpusConfig
    rng: np.random.Generator
    products: dict[str, ProductSpec] = field(default_factory=dict)
    query_ids: dict[str, int] = field(default_factory=dict)

    def category(self) -> str:
        cats = self.cfg.categories
        p = None
        if self.cfg.category_mix is not None:
            w = np.asarray(self.cfg.category_mix, dtype=float)
            p = w / w.sum()
        return str(self.rng.choice(cats, p=p))

    def product(self, category: str | None = None, attrs: dict[str, str] | None = None) -> ProductSpec:
        category = category or self.category()
        sch = CATEGORIES[category]
        drawn = {a: str(self.rng.choice(vals)) for a, vals in sch.attributes.items()}
        drawn.update(attrs or {})
        spec = ProductSpec(f"p{len(self.products):06d}", category, drawn, str(self.rng.choice(sch.brands)))
        self.products[spec.product_id] = spec
        return spec

    def mutate(self, spec: ProductSpec, queried: list[str]) -> ProductSpec:
        """Same category; at least one queried attribute changed."""
        sch = spec.schema
        forced = {}
        n_change = int(self.rng.integers(1, len(queried) + 1))
        for a in self.rng.choice(queried, size=n_change, replace=False):
            others = [v for v in sch.attributes[str(a)] if v != spec.attrs[str(a)]]
            forced[str(a)] = str(self.rng.choice(others))
        for a in queried:
            forced.setdefault(a, spec.attrs[a])
        return self.product(spec.category, forced)

    def qid(self, query: str) -> int:
        return self.query_ids.setdefault(query, len(self.query_ids))

    def record(self, spec: ProductSpec, stage: str, query: str | None, label: int | None,
               title: str, flags: list[str]) -> dict:
        rec = {
            "query": query,
            "title": title,
            "image_path": f"images/{spec.product_id}.{self.cfg.image_format}",
            "stage": stage,
            "product_id": spec.product_id,
            "query_id": self.qid(query) if query else None,
            "noise_flags": list(flags),
            "category": spec.category,
        }
        if label is not None:
            rec["label"] = label
        return rec


def _titles_cached(builder: _Builder, spec: ProductSpec, cache: dict[str, tuple[str, list[str]]],
                   stage: str) -> tuple[str, list[str]]:
    # pretraining pairs come from a more descriptive title source than the shop catalogue
    if spec.product_id not in cache:
        leak = builder.cfg.pair_title_leak if stage == "pairs" else builder.cfg.title_leak
        cache[spec.product_id] = compose_title(spec, builder.rng, builder.cfg.noise_rate, leak)
    return cache[spec.product_id]


def generate_corpus(cfg: CorpusConfig, out_dir: str | Path) -> dict:
    """Write ``stage1.jsonl``, ``stage2.jsonl``, ``stage3.jsonl``, ``eval.jsonl``,
    ``images/``, ``products.jsonl``, ``vocab.json`` and ``corpus.json`` under ``out_dir``.

    Returns the manifest that is also written to ``corpus.json``.
    """
    cfg.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    b = _Builder(cfg, np.random.default_rng(cfg.seed))
    titles: dict[str, tuple[str, list[str]]] = {}

    def rec(spec, stage, query, label):
        return b.record(spec, stage, query, label, *_titles_cached(b, spec, titles, stage))

    n1, n2, n3 = cfg.counts
    stage1 = [rec(b.product(), "pairs", None, None) for _ in range(n1)]

    catalog = [b.product() for _ in range(cfg.click_catalog)]
    stage2 = []
    for _ in range(n2):
        spec = catalog[int(b.rng.integers(len(catalog)))]
        query, _ = compose_query(spec, b.rng)
        stage2.append(rec(spec, "clicks", query, None))

    def labeled(n: int, stage: str) -> list[dict]:
        n_pos = n // 2 + (n % 2)
        labels = [1] * n_pos + [0] * (n - n_pos)
        b.rng.shuffle(labels)
        rows = []
        for lab in labels:
            spec = b.product()
            query, queried = compose_query(spec, b.rng, min_attrs=1)
            target = spec if lab == 1 else b.mutate(spec, queried)
            rows.append(rec(target, stage, query, lab))
        return rows

    stage3 = labeled(n3, "labeled")
    evalset = labeled(cfg.eval_count, "eval")

    for name, rows in (("stage1", stage1), ("stage2", stage2), ("stage3", stage3), ("eval", evalset)):
        with open(out / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    used = {r["product_id"] for rows in (stage1, stage2, stage3, evalset) for r in rows}
    with open(out / "products.jsonl", "w", encoding="utf-8") as fh:
        for pid in sorted(used):
            spec = b.products[pid]
            fh.write(json.dumps({"product_id": pid, "category": spec.category, "attrs": spec.attrs,
                                 "brand": spec.brand, "routing": {k: list(v) for k, v in spec.schema.routing().items()}},
                                sort_keys=True) + "\n")
            save_image(render_image(spec, cfg.seed, cfg.image_size, cfg.image_noise),
                       out / "images" / f"{pid}.{cfg.image_format}")

    (out / "vocab.json").write_text(json.dumps(vocabulary(cfg.categories)), encoding="utf-8")
    manifest = {
        "seed": cfg.seed,
        "counts": {"stage1": n1, "stage2": n2, "stage3": n3, "eval": cfg.eval_count},
        "noise_rate": cfg.noise_rate,
        "image_size": cfg.image_size,
        "image_noise": cfg.image_noise,
        "image_format": cfg.image_format,
        "categories": list(cfg.categories),
        "category_mix": list(cfg.category_mix) if cfg.category_mix else None,
        "click_catalog": cfg.click_catalog,
        "pair_title_leak": cfg.pair_title_leak,
        "title_leak": cfg.title_leak,
        "duplicate_query_density": duplicate_query_density([r["query"] for r in stage2]),
        "label_balance": {k: sum(1 for r in rows if r["label"] == 1) for k, rows in (("stage3", stage3), ("eval", evalset))},
    }
    (out / "corpus.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return manifest


def duplicate_query_density(queries: Sequence[str]) -> float:
    """Fraction of records whose query string occurs more than once."""
    counts = Counter(queries)
    return sum(1 for q in queries if counts[q] > 1) / max(1, len(queries))


def save_image(img: np.ndarray, path: Path) -> None:
    if path.suffix == ".npy":
        np.save(path, img.astype(np.float32))
        return
    arr = np.round(np.transpose(img, (1, 2, 0)) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.transpose(arr, (2, 0, 1))
