"""Offline relevance evaluation: AUC, PR curves, Recall@K, modality weights
and a 2-D embedding projection.

Scores are inner products of unit-norm embeddings.  Four scoring modes are
supported: query against title (QT), image (QI), fused product (QM), and the
divide-and-conquer average of QT and QI (DC).
"""

from __future__ import annotations

import csv
import enum
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus.data import TripletExample
from .encoders import QueryLifeModel, Tokenizer
from .numerics import no_grad


class ScoringMode(str, enum.Enum):
    QT = "QT"
    QI = "QI"
    QM = "QM"
    DC = "DC"


MODES = tuple(m.value for m in ScoringMode)


class EvalConfigError(ValueError):
    pass


# ------------------------------------------------------------- embeddings

@dataclass
class Embeddings:
    """Row-aligned unit-norm embeddings for a list of examples."""

    query: np.ndarray
    title: np.ndarray
    image: np.ndarray
    fusion: np.ndarray


def embed_texts(model: QueryLifeModel, tokenizer: Tokenizer, texts: Sequence[str], batch_size: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(texts), batch_size):
            ids, mask = tokenizer.batch(texts[s:s + batch_size])
            out.append(model.encode_text(ids, mask)[1].data)
    return np.concatenate(out).astype(np.float64)


def embed_products(model: QueryLifeModel, tokenizer: Tokenizer, titles: Sequence[str], images: np.ndarray,
                   batch_size: int = 256) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Z_T, Z_I, Z_M) for aligned title/image rows."""
    zt, zi, zm = [], [], []
    with no_grad():
        for s in range(0, len(titles), batch_size):
            ids, mask = tokenizer.batch(titles[s:s + batch_size])
            img = np.asarray(images[s:s + batch_size], dtype=model.dtype)
            states, z_i = model.encode_image(img)
            zt.append(model.encode_text(ids, mask)[1].data)
            zi.append(z_i.data)
            zm.append(model.encode_fusion(ids, mask, image_states=states)[1].data)
    return tuple(np.concatenate(z).astype(np.float64) for z in (zt, zi, zm))


def embed_examples(model: QueryLifeModel, tokenizer: Tokenizer, examples: Sequence[TripletExample],
                   batch_size: int = 256) -> Embeddings:
    if any(not e.query for e in examples):
        raise ValueError("every evaluation example needs a query")
    q = embed_texts(model, tokenizer, [e.query for e in examples], batch_size)
    zt, zi, zm = embed_products(model, tokenizer, [e.title for e in examples],
                                np.stack([e.image for e in examples]), batch_size)
    return Embeddings(q, zt, zi, zm)


def score(q: np.ndarray, z_t: np.ndarray, z_i: np.ndarray, z_m: np.ndarray, mode: str | ScoringMode) -> np.ndarray:
    """Row-wise relevance scores; all arguments are (N, d) unit-norm arrays (or single vectors)."""
    mode = ScoringMode(mode)
    dot = lambda a, b: np.sum(np.asarray(a) * np.asarray(b), axis=-1)
    if mode is ScoringMode.QT:
        return dot(q, z_t)
    if mode is ScoringMode.QI:
        return dot(q, z_i)
    if mode is ScoringMode.QM:
        return dot(q, z_m)
    return 0.5 * (dot(q, z_t) + dot(q, z_i))


# ---------------------------------------------------------------- metrics

def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    y = y.astype(np.int64)
    if y.min() == y.max():
        raise ValueError("auc and pr_curve need both classes present")
    return s, y


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; a tied positive/negative pair counts one half."""
    s, y = _check_binary(scores, labels)
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    # average ranks over tie groups
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b + 1)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def pr_curve(scores, labels) -> list[tuple[float, float]]:
    """(recall, precision) at every distinct score threshold, highest first.

    At threshold t every example with score >= t is predicted positive.
    """
    s, y = _check_binary(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    n_pos = y.sum()
    return [(float(tp[i] / n_pos), float(tp[i] / (tp[i] + fp[i]))) for i in last]


def recall_at_k(
    score_fn: Callable[[int, np.ndarray], np.ndarray],
    ground_truth: Sequence[str],
    pool: Sequence[str],
    ks: Sequence[int] = (5, 10, 20),
    candidates: int = 100,
    seed: int = 0,
) -> dict[int, float]:
    """Fraction of queries whose ground-truth product ranks within the top K.

    Query ``i`` is ranked against its ground truth plus ``candidates``
    distractors drawn without replacement from ``pool`` minus that ground
    truth, independently per query.  ``score_fn(i, product_ids)`` scores the
    candidates.  Equal scores are ordered by product id.
    """
    pool_arr = np.array(sorted(set(pool)))
    if len(pool_arr) - 1 < candidates:
        raise EvalConfigError(
            f"eval.candidates={candidates} needs a pool of at least {candidates + 1} products, got {len(pool_arr)}")
    if any(k < 1 for k in ks):
        raise EvalConfigError("eval.ks must be positive")
    rng = np.random.default_rng(seed)
    index = {p: i for i, p in enumerate(pool_arr)}
    ranks = np.empty(len(ground_truth), dtype=np.int64)
    for qi, gt in enumerate(ground_truth):
        if gt not in index:
            raise EvalConfigError(f"ground-truth product {gt} is not in the candidate pool")
        draw = rng.choice(len(pool_arr) - 1, size=candidates, replace=False)
        draw = draw + (draw >= index[gt])  # skip the ground truth slot
        cand = np.concatenate([[gt], pool_arr[draw]])
        s = np.asarray(score_fn(qi, cand), dtype=np.float64)
        better = (s[1:] > s[0]) | ((s[1:] == s[0]) & (cand[1:] < gt))
        ranks[qi] = 1 + int(better.sum())
    return {int(k): float(np.mean(ranks <= k)) for k in ks}


def modality_weight(z_m: np.ndarray, z_i: np.ndarray, z_t: np.ndarray, floor: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Per-product image weight ((s_I+1) / ((s_I+1) + (s_T+1))) and a skipped mask.

    s_I = Z_M·Z_I and s_T = Z_M·Z_T.  Products whose shifted sum falls below
    ``floor`` get NaN and are flagged.
    """
    return normalised_weight(np.sum(z_m * z_i, axis=-1) + 1.0, np.sum(z_m * z_t, axis=-1) + 1.0, floor)


def normalised_weight(s_i, s_t, floor: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """s_I / (s_I + s_T) for non-negative similarities; NaN and flagged below ``floor``."""
    s_i, s_t = np.asarray(s_i, dtype=np.float64), np.asarray(s_t, dtype=np.float64)
    denom = s_i + s_t
    skipped = denom < floor
    w = np.where(skipped, np.nan, s_i / np.where(skipped, 1.0, denom))
    return w, skipped


def category_weights(weights: np.ndarray, categories: Sequence[str]) -> dict[str, dict]:
    groups: dict[str, list[float]] = defaultdict(list)
    skipped: dict[str, int] = defaultdict(int)
    for w, c in zip(weights, categories):
        if np.isnan(w):
            skipped[c] += 1
        else:
            groups[c].append(float(w))
    out = {}
    for c in sorted(set(categories)):
        vals = groups.get(c, [])
        out[c] = {"image": float(np.mean(vals)) if vals else float("nan"),
                  "text": 1.0 - float(np.mean(vals)) if vals else float("nan"),
                  "products": len(vals), "skipped": skipped.get(c, 0)}
    return out


def project_2d(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates on the top two principal axes and the full eigenvalue spectrum (descending)."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("projection needs at least two points")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    if evals[0] <= 1e-15:
        raise ValueError("degenerate projection: all points are identical")
    basis = evecs[:, :2]
    # fix the sign so the output does not depend on the eigen-solver
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), [0, 1]])
    basis = basis * np.where(flip == 0, 1.0, flip)
    return centered @ basis, np.clip(evals, 0.0, None)


PROJECTION_COLUMNS = ("role", "modality", "x", "y")
_MODALITY_KEYS = {"title": 0, "image": 1, "fusion": 2}


def export_projection(
    model: QueryLifeModel,
    tokenizer: Tokenizer,
    query: str,
    positives: Sequence[TripletExample],
    negatives: Sequence[TripletExample],
    out_path: str | Path,
    negative_modalities: Sequence[str] = ("title", "image", "fusion"),
) -> list[dict]:
    """Project the query, positive T/I/M embeddings and negative embeddings to 2-D and write a CSV."""
    if len(positives) < 2 or len(negatives) < 2:
        raise ValueError("export_projection needs at least two positives and two negatives")
    bad = set(negative_modalities) - set(_MODALITY_KEYS)
    if bad:
        raise ValueError(f"unknown modalities {sorted(bad)}")
    q = embed_texts(model, tokenizer, [query])
    pos = embed_products(model, tokenizer, [e.title for e in positives], np.stack([e.image for e in positives]))
    neg = embed_products(model, tokenizer, [e.title for e in negatives], np.stack([e.image for e in negatives]))
    labels: list[tuple[str, str]] = [("query", "query")]
    vecs = [q]
    for mod in ("title", "image", "fusion"):
        labels += [("positive", mod)] * len(positives)
        vecs.append(pos[_MODALITY_KEYS[mod]])
    for mod in negative_modalities:
        labels += [("negative", mod)] * len(negatives)
        vecs.append(neg[_MODALITY_KEYS[mod]])
    xy, _ = project_2d(np.concatenate(vecs))
    rows = [{"role": r, "modality": m, "x": float(a), "y": float(b)} for (r, m), (a, b) in zip(labels, xy)]
    _write_csv(out_path, PROJECTION_COLUMNS, rows)
    return rows


def pick_projection_query(examples: Sequence[TripletExample]) -> str | None:
    """The query with the most balanced labeled positives and negatives (ties by text)."""
    counts: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    for e in examples:
        counts[e.query][int(e.positive)] += 1
    best = [(min(n, p), q) for q, (n, p) in counts.items() if min(n, p) >= 2]
    if not best:
        return None
    return sorted(best, key=lambda t: (-t[0], t[1]))[0][1]


# ----------------------------------------------------------------- report

@dataclass
class EvalConfig:
    candidates: int = 100
    ks: tuple[int, ...] = (5, 10, 20)
    seed: int = 0
    batch_size: int = 256
    modes: tuple[str, ...] = MODES

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        self.modes = tuple(self.modes)
        if self.candidates < 1:
            raise ValueError("eval.candidates must be >= 1")
        if not self.ks or any(k < 1 for k in self.ks):
            raise ValueError("eval.ks must be a non-empty list of positive integers")
        if self.batch_size < 1:
            raise ValueError("eval.batch_size must be >= 1")
        bad = set(self.modes) - set(MODES)
        if bad:
            raise ValueError(f"eval.modes has unknown modes {sorted(bad)}")


@dataclass
class EvalReport:
    auc: dict[str, float] = field(default_factory=dict)
    pr: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    recall: dict[str, dict[int, float]] = field(default_factory=dict)
    weights: dict[str, dict] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "auc": self.auc,
            "recall": {m: {str(k): v for k, v in r.items()} for m, r in self.recall.items()},
            "modality_weights": self.weights,
            "pr_points": {m: len(p) for m, p in self.pr.items()},
            "meta": self.meta,
        }

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.json"]
        written[0].write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        for m, pts in self.pr.items():
            p = out / f"pr_curve_{m}.csv"
            _write_csv(p, ("recall", "precision"), [{"recall": r, "precision": pr} for r, pr in pts])
            written.append(p)
        for m, rec in self.recall.items():
            p = out / f"recall_{m}.csv"
            _write_csv(p, ("k", "recall"), [{"k": k, "recall": v} for k, v in sorted(rec.items())])
            written.append(p)
        p = out / "weights.csv"
        _write_csv(p, ("category", "image", "text", "products", "skipped"),
                   [{"category": c, **v} for c, v in sorted(self.weights.items())])
        written.append(p)
        return written


def _write_csv(path: str | Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in columns})


def evaluate(model: QueryLifeModel, tokenizer: Tokenizer, examples: Sequence[TripletExample],
             cfg: EvalConfig | None = None, meta: dict | None = None) -> EvalReport:
    """Full protocol over labeled ``examples`` (the eval split)."""
    cfg = cfg or EvalConfig()
    examples = list(examples)
    if not examples:
        raise ValueError("evaluation set is empty")
    emb = embed_examples(model, tokenizer, examples, cfg.batch_size)
    labels = np.array([int(e.positive) for e in examples])
    report = EvalReport(meta={**(meta or {}), "candidates": cfg.candidates, "seed": cfg.seed,
                              "examples": len(examples), "ks": list(cfg.ks)})

    # one embedding per distinct product for ranking and modality weights
    first: dict[str, int] = {}
    for i, e in enumerate(examples):
        first.setdefault(e.product_id, i)
    pids = sorted(first)
    rows = np.array([first[p] for p in pids])
    prod = {"QT": emb.title[rows], "QI": emb.image[rows], "QM": emb.fusion[rows]}
    pid_index = {p: i for i, p in enumerate(pids)}
    positives = [i for i, e in enumerate(examples) if e.positive]

    for m in cfg.modes:
        s = score(emb.query, emb.title, emb.image, emb.fusion, m)
        report.auc[m] = auc(s, labels)
        report.pr[m] = pr_curve(s, labels)

        def score_fn(qi, cand, m=m):
            idx = np.array([pid_index[c] for c in cand])
            qv = emb.query[positives[qi]]
            if m == "DC":
                return 0.5 * (prod["QT"][idx] @ qv + prod["QI"][idx] @ qv)
            return prod[m][idx] @ qv

        report.recall[m] = recall_at_k(score_fn, [examples[i].product_id for i in positives], pids,
                                       cfg.ks, cfg.candidates, cfg.seed)

    w, _ = modality_weight(prod["QM"], prod["QI"], prod["QT"])
    report.weights = category_weights(w, [examples[i].category or "unknown" for i in rows])
    return report
