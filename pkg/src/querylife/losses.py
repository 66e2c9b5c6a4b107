"""Training objectives.

Contrastive terms take unit-norm embedding matrices and a 0/1 positive-pair
matrix.  Matching terms (ITM, QMM) run the fusion path on positive pairs and
on mined hard negatives and score them with a two-class head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus.data import Batch
from .encoders import QueryLifeModel
from .numerics import Tensor
from .numerics import ops as F

TERMS = ("itc", "itm", "qmm", "qic", "qtc", "qmc")
MINING_MODES = ("sample-proportional", "argmax")


@dataclass
class LossConfig:
    temperature: float = 0.07
    weights: dict[str, float] = field(default_factory=lambda: {t: 1.0 for t in TERMS})
    hard_negative_mode: str = "sample-proportional"
    qmm_mining: str = "query-m"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("losses.temperature must be > 0")
        unknown = set(self.weights) - set(TERMS)
        if unknown:
            raise ValueError(f"losses.weights has unknown terms {sorted(unknown)}")
        self.weights = {t: float(self.weights.get(t, 1.0)) for t in TERMS}
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("losses.weights must be non-negative")
        if self.hard_negative_mode not in MINING_MODES:
            raise ValueError(f"losses.hard_negative_mode must be one of {MINING_MODES}")
        if self.qmm_mining not in ("query-m", "query-image"):
            raise ValueError("losses.qmm_mining must be 'query-m' or 'query-image'")


@dataclass
class LossBreakdown:
    itc: float = 0.0
    itm: float = 0.0
    qmm: float = 0.0
    qic: float = 0.0
    qtc: float = 0.0
    qmc: float = 0.0
    total: float = 0.0
    stats: dict = field(default_factory=dict)

    def terms(self) -> dict[str, float]:
        return {t: getattr(self, t) for t in TERMS}

    def as_row(self) -> dict[str, float]:
        d = asdict(self)
        d.pop("stats")
        return d


# ------------------------------------------------------------- contrastive

def _const(x: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(x, dtype=like.dtype)


def _multi_positive_nll(log_probs: Tensor, positives: np.ndarray, axis: int) -> Tensor | None:
    """Mean over anchors (along ``axis``) of the mean −log p over that anchor's positives.

    Anchors without positives are excluded.  Returns None if none remain.
    """
    pos = np.asarray(positives, dtype=float)
    counts = pos.sum(axis=axis)
    active = counts > 0
    if not active.any():
        return None
    w = np.divide(pos, np.expand_dims(np.where(active, counts, 1.0), axis))
    per_anchor = F.sum(F.mul(log_probs, _const(w, log_probs)), axis=axis)
    sel = np.where(active, -1.0 / active.sum(), 0.0)
    return F.sum(F.mul(per_anchor, _const(sel, per_anchor)))


def _similarity_logits(a: Tensor, b: Tensor, tau: float) -> Tensor:
    return F.scale(F.matmul(a, F.transpose(b)), 1.0 / tau)


def itc_loss(z_t: Tensor, z_i: Tensor, tau: float, positives: np.ndarray | None = None,
             symmetric: bool = True) -> Tensor:
    """In-batch InfoNCE between titles and images.

    Anchor i's denominator runs over every candidate j in the batch.  With
    ``positives`` given, each anchor averages over all of its positives.
    The result is the mean of the text→image and image→text directions.
    """
    if z_t.shape[0] < 1 or z_t.shape != z_i.shape:
        raise ValueError(f"itc_loss needs two equal non-empty (B, d) matrices, got {z_t.shape} and {z_i.shape}")
    b = z_t.shape[0]
    pos = np.eye(b) if positives is None else np.asarray(positives)
    logits = _similarity_logits(z_t, z_i, tau)
    t2i = _multi_positive_nll(F.log_softmax(logits, axis=1), pos, axis=1)
    if not symmetric:
        return t2i
    i2t = _multi_positive_nll(F.log_softmax(logits, axis=0), pos, axis=0)
    return F.scale(F.add(t2i, i2t), 0.5)


def supcon_loss(q: Tensor, z: Tensor, positives: np.ndarray, tau: float) -> Tensor:
    """Supervised contrastive loss of queries against one product modality.

    For anchor i: mean over p in P(i) of −log softmax_j(q_i·z_j/τ)[p],
    averaged over the anchors whose P(i) is non-empty.
    """
    if q.shape != z.shape:
        raise ValueError(f"supcon_loss shape mismatch {q.shape} vs {z.shape}")
    out = _multi_positive_nll(F.log_softmax(_similarity_logits(q, z, tau), axis=1), positives, axis=1)
    if out is None:
        raise ValueError("supcon_loss: every anchor has an empty positive set")
    return out


# ------------------------------------------------------------------ mining

def mine_hard_negatives(
    similarity: np.ndarray,
    positives: np.ndarray,
    mode: str,
    rng: np.random.Generator,
    exclude_diagonal: bool = True,
) -> np.ndarray:
    """One negative column per anchor row, or −1 when the row has no candidate.

    ``sample-proportional`` draws j with probability softmax(similarity[i])
    restricted to non-positive columns; ``argmax`` takes the most similar one.
    ``similarity`` is treated as plain numbers (no gradient).
    """
    if mode not in MINING_MODES:
        raise ValueError(f"unknown mining mode {mode!r}")
    sim = np.asarray(similarity, dtype=np.float64)
    blocked = np.asarray(positives).astype(bool).copy()
    if exclude_diagonal:
        np.fill_diagonal(blocked, True)
    out = np.full(sim.shape[0], -1, dtype=np.int64)
    for i in range(sim.shape[0]):
        cand = np.flatnonzero(~blocked[i])
        if cand.size == 0:
            continue
        s = sim[i, cand]
        if mode == "argmax":
            out[i] = cand[int(np.argmax(s))]
            continue
        w = np.exp(s - s.max())
        cdf = np.cumsum(w / w.sum())
        k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        out[i] = cand[min(k, cand.size - 1)]
    return out


# ---------------------------------------------------------------- matching

def binary_match_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of (N, 2) logits against 0/1 targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape != (len(targets), 2):
        raise ValueError(f"logits shape {logits.shape} vs {len(targets)} targets")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(targets)), targets] = 1.0 / len(targets)
    return F.scale(F.sum(F.mul(F.log_softmax(logits, axis=1), _const(onehot, logits))), -1.0)


@dataclass
class MatchInputs:
    """Pairs to score: text row ``text_idx[k]`` against image row ``image_idx[k]``."""

    text_idx: np.ndarray
    image_idx: np.ndarray
    targets: np.ndarray


def matching_pairs(n: int, diag_targets: np.ndarray, neg_image: np.ndarray, neg_text: np.ndarray) -> MatchInputs:
    """Positive diagonal pairs plus both negative directions, skipping −1 entries.

    ``neg_image[i]``: image paired with text i.  ``neg_text[j]``: text paired with image j.
    """
    a = np.flatnonzero(neg_image >= 0)
    b = np.flatnonzero(neg_text >= 0)
    rows = np.arange(n)
    text_idx = np.concatenate([rows, a, neg_text[b]])
    image_idx = np.concatenate([rows, neg_image[a], b])
    targets = np.concatenate([np.asarray(diag_targets, dtype=np.int64), np.zeros(a.size + b.size, dtype=np.int64)])
    return MatchInputs(text_idx, image_idx, targets)


def _fuse_pairs(model: QueryLifeModel, ids, mask, image_states: Tensor, pairs: MatchInputs):
    tok = ids[pairs.text_idx]
    msk = mask[pairs.text_idx]
    img = F.take(image_states, pairs.image_idx, axis=0)
    return model.encode_fusion(tok, msk, image_states=img)


def itm_loss(model: QueryLifeModel, batch: Batch, image_states: Tensor, pairs: MatchInputs) -> tuple[Tensor, Tensor]:
    """Title-image matching over positives and mined negatives.

    Returns ``(loss, fused_embeddings)``; the first B rows of the fused
    embeddings are the product M representations of the batch.
    """
    _, z_m, cls_state = _fuse_pairs(model, batch.title_ids, batch.title_mask, image_states, pairs)
    return binary_match_loss(model.match_logits("itm", cls_state), pairs.targets), z_m


def qmm_loss(model: QueryLifeModel, batch: Batch, image_states: Tensor, pairs: MatchInputs) -> Tensor:
    """Query-M matching: the query replaces the title as the fusion text stream."""
    _, _, cls_state = _fuse_pairs(model, batch.query_ids, batch.query_mask, image_states, pairs)
    return binary_match_loss(model.match_logits("qmm", cls_state), pairs.targets)


# ------------------------------------------------------------------- total

def stage_weights(cfg: LossConfig, stage: int) -> dict[str, float]:
    """Stage 1 trains ITC alone; later stages use every configured term."""
    if stage == 1:
        return {t: (cfg.weights["itc"] if t == "itc" else 0.0) for t in TERMS}
    return dict(cfg.weights)


def total_loss(
    model: QueryLifeModel,
    batch: Batch,
    cfg: LossConfig,
    stage: int,
    rng: np.random.Generator,
) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the active terms for ``stage`` plus a per-term breakdown.

    Terms with zero weight are not evaluated and report 0.
    """
    w = stage_weights(cfg, stage)
    tau = cfg.temperature
    n = len(batch)
    needs_query = any(w[t] > 0 for t in ("qmm", "qic", "qtc", "qmc"))
    if needs_query and not batch.has_queries:
        raise ValueError(f"stage {stage} loss needs queries but the batch has none")

    values: dict[str, Tensor] = {}
    stats: dict[str, int] = {}
    image_states, z_i = model.encode_image(batch.images)
    _, z_t = model.encode_text(batch.title_ids, batch.title_mask)

    values["itc"] = itc_loss(z_t, z_i, tau, batch.it_labels)

    z_m = None
    if w["itm"] > 0 or w["qmc"] > 0:
        if w["itm"] > 0:
            sim = (z_t.data @ z_i.data.T) / tau
            neg_img = mine_hard_negatives(sim, batch.it_labels, cfg.hard_negative_mode, rng)
            neg_txt = mine_hard_negatives(sim.T, batch.it_labels.T, cfg.hard_negative_mode, rng)
            pairs = matching_pairs(n, np.ones(n), neg_img, neg_txt)
            stats["itm_skipped"] = int((neg_img < 0).sum() + (neg_txt < 0).sum())
            values["itm"], fused = itm_loss(model, batch, image_states, pairs)
            z_m = F.slice(fused, slice(0, n))
        else:
            _, z_m, _ = model.encode_fusion(batch.title_ids, batch.title_mask, image_states=image_states)

    if needs_query:
        _, q = model.encode_text(batch.query_ids, batch.query_mask)
        qp = batch.qp_labels
        if qp.sum() == 0:
            # every query row is a labeled negative; nothing to align against
            stats["qma_skipped"] = 1
        else:
            if w["qic"] > 0:
                values["qic"] = supcon_loss(q, z_i, qp, tau)
            if w["qtc"] > 0:
                values["qtc"] = supcon_loss(q, z_t, qp, tau)
            if w["qmc"] > 0:
                values["qmc"] = supcon_loss(q, z_m, qp, tau)
        if w["qmm"] > 0:
            target = z_i if cfg.qmm_mining == "query-image" else (z_m if z_m is not None else None)
            if target is None:
                _, target, _ = model.encode_fusion(batch.title_ids, batch.title_mask, image_states=image_states)
            sim = (q.data @ target.data.T) / tau
            neg_img = mine_hard_negatives(sim, qp, cfg.hard_negative_mode, rng)
            neg_qry = mine_hard_negatives(sim.T, qp.T, cfg.hard_negative_mode, rng)
            stats["qmm_skipped"] = int((neg_img < 0).sum() + (neg_qry < 0).sum())
            pairs = matching_pairs(n, qp.diagonal(), neg_img, neg_qry)
            values["qmm"] = qmm_loss(model, batch, image_states, pairs)

    total = None
    for t in TERMS:
        if w[t] > 0 and t in values:
            term = F.scale(values[t], w[t]) if w[t] != 1.0 else values[t]
            total = term if total is None else F.add(total, term)
    if total is None:
        total = F.scale(values["itc"], 0.0)

    parts = {t: (values[t].item() if (w[t] > 0 and t in values) else 0.0) for t in TERMS}
    breakdown = LossBreakdown(**parts, total=float(sum(w[t] * parts[t] for t in TERMS)), stats=stats)
    return total, breakdown
