"""Three-stage training schedule.

Stage 1 aligns titles with images (ITC only) on product pairs.  Stage 2 adds
the query terms on clicked triplets with GenFilt-corrected labels.  Stage 3
fine-tunes on human-labeled triplets, where label-0 rows act as explicit
negatives.  Each stage starts a fresh optimizer and schedule from the previous
stage's checkpoint, so running stages one at a time gives the same result as
running them together.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import genfilt as gf
from ..encoders import EncoderConfig, QueryLifeModel, Tokenizer
from ..losses import TERMS, LossConfig, total_loss
from ..numerics import AdamWState, Graph, LrSchedule, NumericDomainError, adamw_update, cosine_warmup_lr
from .data import load_dataset, make_batches, num_batches

log = logging.getLogger(__name__)

LOG_COLUMNS = ("stage", "step", "lr", *TERMS, "total")


@dataclass
class StageConfig:
    dataset: str
    epochs: int
    batch_size: int
    genfilt: bool = False
    terms: tuple[str, ...] = TERMS
    max_lr: float | None = None

    def __post_init__(self):
        self.terms = tuple(self.terms)
        if self.epochs < 0:
            raise ValueError("schedule.epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("schedule.batch_size must be >= 2 for in-batch negatives")
        if set(self.terms) - set(TERMS):
            raise ValueError(f"schedule.terms has unknown terms {sorted(set(self.terms) - set(TERMS))}")


@dataclass
class OptimConfig:
    max_lr: float = 2e-3
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.05
    eps: float = 1e-8
    clip_norm: float | None = None

    def __post_init__(self):
        if self.max_lr < 0:
            raise ValueError("optimizer.max_lr must be >= 0")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("optimizer.warmup_fraction must lie in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("optimizer.clip_norm must be positive when set")


def default_schedule() -> list[StageConfig]:
    return [
        StageConfig("stage1.jsonl", epochs=3, batch_size=64, genfilt=False, terms=("itc",)),
        StageConfig("stage2.jsonl", epochs=4, batch_size=64, genfilt=True),
        StageConfig("stage3.jsonl", epochs=3, batch_size=64, genfilt=True),
    ]


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainingResult:
    checkpoints: dict[int, str] = field(default_factory=dict)
    hashes: dict[int, str] = field(default_factory=dict)
    log_rows: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def load_tokenizer(data_dir: str | Path, max_len: int) -> Tokenizer:
    words = json.loads((Path(data_dir) / "vocab.json").read_text(encoding="utf-8"))
    return Tokenizer(words, max_len=max_len)


def checkpoint_path(out_dir: str | Path, stage: int) -> Path:
    return Path(out_dir) / f"stage{stage}.ckpt"


def _write_log(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in LOG_COLUMNS})


def read_log(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _merge_logs(out_dir: Path) -> None:
    rows: list[dict] = []
    for k in (1, 2, 3):
        p = out_dir / f"train_log.stage{k}.csv"
        if p.exists():
            rows.extend(read_log(p))
    with open(out_dir / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def run_training_schedule(
    encoder: EncoderConfig,
    losses: LossConfig,
    schedule: Sequence[StageConfig],
    optim: OptimConfig,
    data_dir: str | Path,
    out_dir: str | Path,
    seed: int,
    stages: Sequence[int] = (1, 2, 3),
    genfilt=None,
    init_checkpoint: str | Path | None = None,
    precision: str = "float32",
    feature_cache: str | Path | None = None,
) -> TrainingResult:
    """Run the requested stages in order and write ``stage{k}.ckpt`` and logs to ``out_dir``.

    A run that starts after stage 1 loads ``init_checkpoint`` or, failing
    that, the previous stage's checkpoint in ``out_dir``.
    """
    stages = sorted(set(stages))
    if any(s not in (1, 2, 3) for s in stages):
        raise ValueError("stages must be drawn from 1, 2, 3")
    if len(schedule) != 3:
        raise ValueError("schedule must describe exactly three stages")
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = np.float64 if precision == "float64" else np.float32
    tokenizer = load_tokenizer(data_dir, encoder.max_text_len)
    if len(tokenizer) > encoder.vocab_size:
        raise ValueError(f"encoder.vocab_size {encoder.vocab_size} is below the corpus vocabulary size {len(tokenizer)}")

    model = QueryLifeModel(encoder, seed=seed, dtype=dtype)
    first = stages[0]
    if first > 1:
        src = Path(init_checkpoint) if init_checkpoint else checkpoint_path(out_dir, first - 1)
        if not src.exists():
            raise FileNotFoundError(f"stage {first} needs a starting checkpoint; {src} does not exist")
        model = QueryLifeModel.load(src)
        if model.dtype != np.dtype(dtype):
            model = model.astype(dtype)
    elif init_checkpoint:
        model = QueryLifeModel.load(init_checkpoint).astype(dtype)

    result = TrainingResult()
    t0 = time.perf_counter()
    images: dict[str, np.ndarray] = {}
    features = None
    for stage in stages:
        sc = schedule[stage - 1]
        data = load_dataset(data_dir / sc.dataset, images)
        use_filter = stage > 1 and sc.genfilt and genfilt is not None and genfilt.enabled
        index = None
        if use_filter:
            fresh = gf.precompute_features([data], gf.SyntheticGenerator(image_size=encoder.image_size), feature_cache)
            features = {**(features or {}), **fresh}
            index = gf.SimilarityIndex(genfilt.similarity_backend, model, tokenizer)

        stage_losses = LossConfig(
            temperature=losses.temperature,
            weights={t: (losses.weights[t] if t in sc.terms else 0.0) for t in TERMS},
            hard_negative_mode=losses.hard_negative_mode,
            qmm_mining=losses.qmm_mining,
        )
        per_epoch = num_batches(len(data), sc.batch_size)
        total_steps = max(1, per_epoch * sc.epochs)
        max_lr = optim.max_lr if sc.max_lr is None else sc.max_lr
        sched = LrSchedule(max_lr, min(int(optim.warmup_fraction * total_steps), total_steps - 1), total_steps)
        state = AdamWState(optim.beta1, optim.beta2, optim.weight_decay, optim.eps)
        rng = np.random.default_rng([seed, stage, 1])
        model.set_dropout_rng(np.random.default_rng([seed, stage, 2]) if encoder.dropout > 0 else None)
        rows: list[dict] = []
        step = 0
        for epoch in range(sc.epochs):
            for batch in make_batches(data, sc.batch_size, seed * 1000 + stage, epoch=epoch,
                                      tokenizer=tokenizer, dtype=dtype):
                if use_filter:
                    gf.apply_filter(batch, features, genfilt, index)
                lr = cosine_warmup_lr(step, sched)
                snapshot = model.state_dict()
                try:
                    with Graph() as g:
                        loss, parts = total_loss(model, batch, stage_losses, stage, rng)
                        grads = g.backward(loss, model.params)
                    for name, gval in grads.items():
                        if not np.isfinite(gval).all():
                            raise NumericDomainError(f"non-finite gradient for {name}")
                    adamw_update(model.params, grads, state, lr, optim.clip_norm)
                except NumericDomainError as err:
                    model.load_state_dict(snapshot)
                    good = out_dir / "last_good.ckpt"
                    model.save(good, {"stage": stage, "step": step})
                    raise TrainingAborted(
                        f"stage {stage} step {step}: {err}; last good parameters saved to {good}") from err
                row = {"stage": stage, "step": step, "lr": lr, **parts.as_row()}
                rows.append(row)
                step += 1
            log.info("stage %d epoch %d done, last total %.4f", stage, epoch, rows[-1]["total"] if rows else float("nan"))
        model.set_dropout_rng(None)
        ck = checkpoint_path(out_dir, stage)
        result.hashes[stage] = model.save(ck, {"stage": stage, "seed": seed, "steps": step})
        result.checkpoints[stage] = str(ck)
        _write_log(out_dir / f"train_log.stage{stage}.csv", rows)
        result.log_rows.extend(rows)
    _merge_logs(out_dir)
    result.seconds = time.perf_counter() - t0
    return result
