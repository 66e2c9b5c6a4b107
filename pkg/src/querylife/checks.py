"""Finite-difference verification of every training objective in float64."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .encoders import EncoderConfig, QueryLifeModel
from .losses import TERMS, binary_match_loss, itc_loss, matching_pairs, supcon_loss
from .numerics import Graph, Tensor, finite_difference_gradient, max_relative_error, precision
from .numerics import ops as F

TOLERANCE = 1e-4

_TINY = EncoderConfig(vocab_size=12, model_dim=8, num_layers=1, vit_layers=1, num_heads=2, ffn_dim=12,
                      max_text_len=5, image_size=8, patch_size=4, projection_dim=8)


@dataclass
class GradcheckRow:
    term: str
    trials: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _positives(rng: np.random.Generator, n: int) -> np.ndarray:
    pos = (rng.random((n, n)) < 0.3).astype(np.int8)
    np.fill_diagonal(pos, 1)
    return pos


def _check_leaves(loss_fn, leaves: list[Tensor]) -> float:
    with Graph() as g:
        loss = loss_fn()
        grads = g.backward(loss, {f"x{i}": t for i, t in enumerate(leaves)})
    worst = 0.0
    for i, t in enumerate(leaves):
        numeric = finite_difference_gradient(lambda: loss_fn().item(), t)
        worst = max(worst, max_relative_error(grads[f"x{i}"], numeric))
    return worst


def _contrastive_trial(term: str, rng: np.random.Generator) -> float:
    """ITC and the supervised contrastive terms, differentiated through the l2 normalisation."""
    n, d = int(rng.integers(2, 6)), int(rng.integers(3, 7))
    a = Tensor(rng.standard_normal((n, d)), requires_grad=True)
    b = Tensor(rng.standard_normal((n, d)), requires_grad=True)
    pos = _positives(rng, n)
    tau = float(rng.uniform(0.1, 1.0))
    if term == "itc":
        fn = lambda: itc_loss(F.l2_normalize(a), F.l2_normalize(b), tau, pos)  # noqa: E731
    else:
        fn = lambda: supcon_loss(F.l2_normalize(a), F.l2_normalize(b), pos, tau)  # noqa: E731
    return _check_leaves(fn, [a, b])


def _model_contrastive_trial(term: str, model: QueryLifeModel, rng: np.random.Generator, coords: int) -> float:
    """QIC / QTC / QMC evaluated through the encoders on sampled parameter coordinates."""
    n = int(rng.integers(2, 5))
    ids, mask = _random_text(rng, n, model.cfg)
    q_ids, q_mask = _random_text(rng, n, model.cfg)
    images = rng.random((n, 3, model.cfg.image_size, model.cfg.image_size))
    pos = _positives(rng, n)
    tau = float(rng.uniform(0.1, 1.0))

    def fn():
        _, q = model.encode_text(q_ids, q_mask)
        if term == "qtc":
            _, z = model.encode_text(ids, mask)
        elif term == "qic":
            _, z = model.encode_image(images)
        else:
            _, z, _ = model.encode_fusion(ids, mask, images=images)
        return supcon_loss(q, z, pos, tau)

    prefixes = {"qtc": ("encoder.",), "qic": ("vit.", "proj.image"), "qmc": ("encoder.layer0.crossattn", "proj.fusion")}[term]
    return _param_coords_error(model, fn, prefixes, rng, coords)


def _match_trial(term: str, model: QueryLifeModel, rng: np.random.Generator, coords: int) -> float:
    """ITM / QMM with fixed negatives, on head and cross-attention coordinates."""
    n = int(rng.integers(2, 5))
    ids, mask = _random_text(rng, n, model.cfg)
    images = rng.random((n, 3, model.cfg.image_size, model.cfg.image_size))
    neg_img = rng.permutation(n)
    neg_img[neg_img == np.arange(n)] = -1
    neg_txt = np.roll(np.arange(n), 1)
    diag = np.ones(n) if term == "itm" else rng.integers(0, 2, n)
    pairs = matching_pairs(n, diag, neg_img, neg_txt)

    def fn():
        states, _ = model.encode_image(images)
        img = F.take(states, pairs.image_idx, axis=0)
        _, _, cls = model.encode_fusion(ids[pairs.text_idx], mask[pairs.text_idx], image_states=img)
        return binary_match_loss(model.match_logits(term, cls), pairs.targets)

    prefixes = (f"head.{term}", "encoder.layer0.crossattn", "vit.patch")
    return _param_coords_error(model, fn, prefixes, rng, coords)


def _random_text(rng: np.random.Generator, n: int, cfg: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    ids = np.zeros((n, cfg.max_text_len), dtype=np.int64)
    mask = np.zeros((n, cfg.max_text_len), dtype=bool)
    for i in range(n):
        k = int(rng.integers(2, cfg.max_text_len + 1))
        ids[i, 0] = 1
        ids[i, 1:k] = rng.integers(3, cfg.vocab_size, k - 1)
        mask[i, :k] = True
    return ids, mask


def _param_coords_error(model: QueryLifeModel, fn, prefixes, rng: np.random.Generator, coords: int,
                        h: float = 1e-5) -> float:
    with Graph() as g:
        loss = fn()
        grads = g.backward(loss, model.params)
    names = [k for k in sorted(model.params) if k.startswith(prefixes)]
    worst = 0.0
    for _ in range(coords):
        name = names[int(rng.integers(len(names)))]
        flat = model.params[name].data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, max_relative_error(np.array([grads[name].reshape(-1)[i]]), np.array([numeric])))
    return worst


def run_gradcheck(trials: int = 20, seed: int = 0, coords: int = 6) -> list[GradcheckRow]:
    """One row per loss term: the worst relative error over ``trials`` random instances."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rows = []
    with precision("float64"):
        for k, term in enumerate(TERMS):
            rng = np.random.default_rng([seed, k])
            t0 = time.perf_counter()
            worst = 0.0
            for trial in range(trials):
                if term in ("itc",) or (term in ("qic", "qtc", "qmc") and trial % 2 == 0):
                    err = _contrastive_trial(term, rng)
                else:
                    model = QueryLifeModel(_TINY, seed=int(rng.integers(1 << 30)), dtype=np.float64)
                    _perturb(model, rng)
                    if term in ("itm", "qmm"):
                        err = _match_trial(term, model, rng, coords)
                    else:
                        err = _model_contrastive_trial(term, model, rng, coords)
                worst = max(worst, err)
            rows.append(GradcheckRow(term, trials, worst, time.perf_counter() - t0))
    return rows


def _perturb(model: QueryLifeModel, rng: np.random.Generator) -> None:
    # larger weights than the training init so no term sits in a flat region
    for p in model.params.values():
        p.data += 0.3 * rng.standard_normal(p.data.shape)


def format_table(rows: list[GradcheckRow]) -> str:
    lines = [f"{'term':<6} {'trials':>6} {'max_rel_error':>14} {'status':>6}"]
    for r in rows:
        lines.append(f"{r.term:<6} {r.trials:>6} {r.max_rel_error:>14.3e} {'pass' if r.passed else 'FAIL':>6}")
    return "\n".join(lines)
