"""Patch backbone, universal modal encoder, projection and match heads.

The universal encoder owns one stack of layers, each holding a
self-attention, a cross-attention and a feed-forward sub-block (pre-norm,
residual).  The three paths share those weights:

* text:   self-attention -> feed-forward
* image:  ViT output sequence -> self-attention -> feed-forward
* fusion: self-attention -> cross-attention over image states -> feed-forward
"""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import Tensor, checkpoint
from .numerics import ops as F

PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
PAD_ID, CLS_ID, UNK_ID = 0, 1, 2
_MASK_VALUE = -1e9


@dataclass
class EncoderConfig:
    vocab_size: int = 128
    model_dim: int = 32
    num_layers: int = 2
    vit_layers: int = 2
    num_heads: int = 2
    ffn_dim: int = 64
    max_text_len: int = 16
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    projection_dim: int = 32
    init_std: float = 0.02
    dropout: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError("encoder.model_dim must be divisible by encoder.num_heads")
        if self.image_size % self.patch_size:
            raise ValueError("encoder.image_size must be divisible by encoder.patch_size")
        if self.projection_dim > self.model_dim:
            raise ValueError("encoder.projection_dim must not exceed encoder.model_dim")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("encoder.dropout must lie in [0, 1)")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


class Tokenizer:
    """Whitespace tokenizer over a fixed vocabulary; unknown words map to [UNK]."""

    def __init__(self, words: Iterable[str], max_len: int = 16):
        self.itos = [PAD, CLS, UNK]
        for w in words:
            if w not in self.itos:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.max_len = max_len

    def __len__(self) -> int:
        return len(self.itos)

    @staticmethod
    def split(text: str) -> list[str]:
        return [t for t in re.split(r"\s+", text.strip().lower()) if t]

    def encode(self, text: str) -> list[int]:
        words = self.split(text)
        if not words:
            raise ValueError("cannot encode an empty token sequence")
        ids = [CLS_ID] + [self.stoi.get(w, UNK_ID) for w in words]
        return ids[: self.max_len]

    def batch(self, texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Pad to the longest sequence; returns ``(ids, mask)`` with mask True on real tokens."""
        seqs = [self.encode(t) for t in texts]
        length = max(len(s) for s in seqs)
        ids = np.full((len(seqs), length), PAD_ID, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
        return ids, ids != PAD_ID


def patchify_pixels(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, (H/patch)^2, C*patch*patch), row-major over patches."""
    b, c, h, w = images.shape
    n = h // patch
    x = images.reshape(b, c, n, patch, n, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, n * n, c * patch * patch)


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class QueryLifeModel:
    """All trainable weights, addressable by name, plus the forward paths."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.capture_attention = False
        self.attention_log: list[tuple[str, np.ndarray]] = []
        self._dropout_rng: np.random.Generator | None = None
        self._build(np.random.default_rng(seed))

    # ------------------------------------------------------------ parameters
    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value.astype(self.dtype), requires_grad=True, name=name, dtype=self.dtype)

    def _build(self, rng: np.random.Generator) -> None:
        c = self.cfg
        D, std = c.model_dim, c.init_std
        normal = lambda *shape: _truncated_normal(rng, shape, std)  # noqa: E731

        def linear(prefix, n_in, n_out, bias=True):
            self._add(f"{prefix}.w", normal(n_in, n_out))
            if bias:
                self._add(f"{prefix}.b", np.zeros(n_out))

        def norm(prefix):
            self._add(f"{prefix}.g", np.ones(D))
            self._add(f"{prefix}.b", np.zeros(D))

        def attention(prefix):
            norm(f"{prefix}.ln")
            for part in "qkvo":
                linear(f"{prefix}.{part}", D, D)

        def ffn(prefix):
            norm(f"{prefix}.ln")
            linear(f"{prefix}.fc1", D, c.ffn_dim)
            linear(f"{prefix}.fc2", c.ffn_dim, D)

        linear("vit.patch", c.channels * c.patch_size**2, D)
        self._add("vit.cls", normal(D))
        self._add("vit.pos", normal(c.num_patches + 1, D))
        for i in range(c.vit_layers):
            attention(f"vit.layer{i}.attn")
            ffn(f"vit.layer{i}.ffn")
        norm("vit.ln")

        self._add("encoder.tok", normal(c.vocab_size, D))
        self._add("encoder.pos", normal(c.max_text_len, D))
        for i in range(c.num_layers):
            attention(f"encoder.layer{i}.selfattn")
            attention(f"encoder.layer{i}.crossattn")
            ffn(f"encoder.layer{i}.ffn")
        norm("encoder.ln")

        for kind in ("text", "image", "fusion"):
            linear(f"proj.{kind}", D, c.projection_dim, bias=False)
        for head in ("itm", "qmm"):
            linear(f"head.{head}", D, 2)

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, t in self.params.items():
            if state[n].shape != t.shape:
                raise ValueError(f"{n}: checkpoint shape {state[n].shape} vs model {t.shape}")
            t.data = np.array(state[n], dtype=self.dtype)

    def save(self, path: str | Path, meta: dict | None = None) -> str:
        precision = "float64" if self.dtype == np.float64 else "float32"
        meta = dict(meta or {})
        meta["encoder"] = dataclasses.asdict(self.cfg)
        return checkpoint.save(path, self.state_dict(), precision, meta)

    @classmethod
    def load(cls, path: str | Path) -> "QueryLifeModel":
        tensors, header = checkpoint.load(path)
        cfg = EncoderConfig(**header["meta"]["encoder"])
        dtype = np.float64 if header["precision"] == "float64" else np.float32
        model = cls(cfg, seed=0, dtype=dtype)
        model.load_state_dict(tensors)
        return model

    def astype(self, dtype) -> "QueryLifeModel":
        other = QueryLifeModel(self.cfg, seed=0, dtype=dtype)
        other.load_state_dict(self.state_dict())
        return other

    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        """Dropout is active only while an rng is installed (training)."""
        self._dropout_rng = rng

    # --------------------------------------------------------------- blocks
    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        y = F.matmul(x, self.params[f"{prefix}.w"])
        b = self.params.get(f"{prefix}.b")
        return F.add_bias(y, b) if b is not None else y

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return F.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _dropout(self, x: Tensor) -> Tensor:
        rate = self.cfg.dropout
        if rate <= 0.0 or self._dropout_rng is None:
            return x
        keep = (self._dropout_rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
        return F.mul(x, Tensor(keep, dtype=x.dtype))

    def _heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        h = self.cfg.num_heads
        return F.transpose(F.reshape(x, (b, n, h, -1)), (0, 2, 1, 3))

    def _attention(self, x: Tensor, prefix: str, key_mask: np.ndarray | None, context: Tensor | None = None) -> Tensor:
        """Pre-norm multi-head attention sub-block returning the residual update."""
        h = self._norm(x, f"{prefix}.ln")
        kv = h if context is None else context
        q = self._heads(self._linear(h, f"{prefix}.q"))
        k = self._heads(self._linear(kv, f"{prefix}.k"))
        v = self._heads(self._linear(kv, f"{prefix}.v"))
        dh = self.cfg.model_dim // self.cfg.num_heads
        scores = F.scale(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if key_mask is not None:
            bias = np.where(key_mask, 0.0, _MASK_VALUE).astype(scores.dtype)
            bias = np.broadcast_to(bias[:, None, None, :], scores.shape)
            scores = F.add(scores, Tensor(np.ascontiguousarray(bias), dtype=scores.dtype))
        attn = F.softmax(scores, axis=-1)
        if self.capture_attention:
            self.attention_log.append((prefix, attn.data.copy()))
        out = F.matmul(attn, v)
        b, _, n, _ = out.shape
        out = F.reshape(F.transpose(out, (0, 2, 1, 3)), (b, n, self.cfg.model_dim))
        return self._dropout(self._linear(out, f"{prefix}.o"))

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        h = self._norm(x, f"{prefix}.ln")
        h = F.gelu(self._linear(h, f"{prefix}.fc1"))
        return self._dropout(self._linear(h, f"{prefix}.fc2"))

    def _broadcast_rows(self, table: Tensor, batch: int) -> Tensor:
        """(n, D) parameter -> (batch, n, D) by explicit row gather."""
        lifted = F.reshape(table, (1,) + table.shape)
        return F.take(lifted, np.zeros(batch, dtype=np.int64), axis=0)

    def _pool(self, states: Tensor, proj: str) -> tuple[Tensor, Tensor]:
        cls_state = F.slice(states, (slice(None), 0))
        z = F.l2_normalize(F.matmul(cls_state, self.params[f"proj.{proj}.w"]), axis=-1)
        return z, cls_state

    # ---------------------------------------------------------------- paths
    def patchify(self, images: np.ndarray) -> Tensor:
        """Patch tokens with CLS prepended and position embeddings added: (B, P+1, D)."""
        images = np.asarray(images)
        c = self.cfg
        if images.ndim != 4 or images.shape[1:] != (c.channels, c.image_size, c.image_size):
            raise ValueError(
                f"image batch shape {images.shape} does not match "
                f"(B, {c.channels}, {c.image_size}, {c.image_size})")
        pixels = Tensor(patchify_pixels(images - 0.5, c.patch_size), dtype=self.dtype)
        tokens = self._linear(pixels, "vit.patch")
        b = images.shape[0]
        cls_tok = self._broadcast_rows(F.reshape(self.params["vit.cls"], (1, c.model_dim)), b)
        seq = F.concat([cls_tok, tokens], axis=1)
        return F.add(seq, self._broadcast_rows(self.params["vit.pos"], b))

    def vit(self, images: np.ndarray) -> Tensor:
        x = self.patchify(images)
        for i in range(self.cfg.vit_layers):
            x = F.add(x, self._attention(x, f"vit.layer{i}.attn", None))
            x = F.add(x, self._ffn(x, f"vit.layer{i}.ffn"))
        return self._norm(x, "vit.ln")

    def _encoder(self, x: Tensor, mask: np.ndarray | None, image_states: Tensor | None = None) -> Tensor:
        for i in range(self.cfg.num_layers):
            pre = f"encoder.layer{i}"
            x = F.add(x, self._attention(x, f"{pre}.selfattn", mask))
            if image_states is not None:
                x = F.add(x, self._attention(x, f"{pre}.crossattn", None, context=image_states))
            x = F.add(x, self._ffn(x, f"{pre}.ffn"))
        return self._norm(x, "encoder.ln")

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ValueError("token batch must be (B, L) with L >= 1")
        if ids.shape[1] > self.cfg.max_text_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_text_len {self.cfg.max_text_len}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise ValueError("token id outside vocabulary")
        b, n = ids.shape
        tok = F.embedding(self.params["encoder.tok"], ids)
        pos = F.take(self.params["encoder.pos"], np.arange(n), axis=0)
        return F.add(tok, self._broadcast_rows(pos, b))

    def encode_text(self, ids: np.ndarray, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Text path. Returns (states (B, L, D), unit-norm embedding (B, d))."""
        mask = np.asarray(ids) != PAD_ID if mask is None else mask
        states = self._encoder(self.embed_tokens(ids), mask)
        z, _ = self._pool(states, "text")
        return states, z

    def encode_image(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        """Image path. Returns (states (B, P+1, D), unit-norm embedding (B, d))."""
        states = self._encoder(self.vit(images), None)
        z, _ = self._pool(states, "image")
        return states, z

    def encode_fusion(
        self,
        ids: np.ndarray,
        mask: np.ndarray | None = None,
        images: np.ndarray | None = None,
        image_states: Tensor | None = None,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Fusion path: text stream cross-attending to image states.

        Pass either raw ``images`` or precomputed ``image_states`` from
        :meth:`encode_image`.  Returns (states, unit-norm M embedding, CLS state).
        """
        if image_states is None:
            if images is None:
                raise ValueError("encode_fusion needs images or image_states")
            image_states, _ = self.encode_image(images)
        mask = np.asarray(ids) != PAD_ID if mask is None else mask
        if image_states.shape[0] != np.shape(ids)[0]:
            raise ValueError("text and image batches differ in size")
        states = self._encoder(self.embed_tokens(ids), mask, image_states)
        z, cls_state = self._pool(states, "fusion")
        return states, z, cls_state

    def match_logits(self, head: str, state: Tensor) -> Tensor:
        """Two-class logits {not-match, match} from a CLS state (B, D) -> (B, 2)."""
        if head not in ("itm", "qmm"):
            raise ValueError(f"unknown match head {head!r}")
        if state.shape[-1] != self.cfg.model_dim:
            raise ValueError(f"state width {state.shape[-1]} != model_dim {self.cfg.model_dim}")
        return self._linear(state, f"head.{head}")
