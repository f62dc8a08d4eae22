"""Token fusion, pooling variants and the binary classification head.

Variants map onto the fusion ablation grid:

* ``cat``        concatenate, then average pool
* ``cat-att``    concatenate, one self-attention layer, then average pool
* ``cat-latent`` concatenate, then latent attention pooling
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import (
    MODALITY_ORDER,
    EncoderConfig,
    Modality,
    MultiHeadSelfAttention,
    RopeMode,
    TokenSequence,
    _merge_heads,
    _split_heads,
    apply_rope,
    ordinal_positions,
)
from .errors import ConfigError, ContractError, DimensionError
from .layers import MLP, LayerNorm, Linear, Module
from .pose_io import Label
from .tensor import Tensor


class Variant(str, enum.Enum):
    CAT = "cat"
    CAT_ATT = "cat-att"
    CAT_LATENT = "cat-latent"


class LatentQueryMode(str, enum.Enum):
    LATENTS = "latents"  # latents query the tokens
    TOKENS = "tokens"  # tokens query the latent dictionary


@dataclass
class FusionConfig:
    variant: Variant = Variant.CAT_LATENT
    rope_mode: RopeMode = RopeMode.ALIGNED
    modalities: tuple[Modality, ...] = MODALITY_ORDER
    n_latents: int = 16
    query_mode: LatentQueryMode = LatentQueryMode.LATENTS

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.rope_mode = RopeMode(self.rope_mode)
        self.query_mode = LatentQueryMode(self.query_mode)
        mods = {Modality(m) for m in self.modalities}
        if not mods:
            raise ConfigError("at least one modality is required")
        self.modalities = tuple(m for m in MODALITY_ORDER if m in mods)
        if self.n_latents < 1:
            raise ConfigError("n_latents must be >= 1")

    def to_json(self) -> dict:
        return {
            "variant": self.variant.value,
            "rope_mode": self.rope_mode.value,
            "modalities": [m.value for m in self.modalities],
            "n_latents": self.n_latents,
            "query_mode": self.query_mode.value,
        }


def _batch_size(seqs) -> int | None:
    sizes = {s.tokens.shape[0] for s in seqs if s.tokens.ndim == 3}
    if len(sizes) > 1:
        raise DimensionError(f"sequences disagree on batch size: {sorted(sizes)}")
    return sizes.pop() if sizes else None


def fuse(seqs, cfg: FusionConfig) -> TokenSequence:
    """Concatenate in knowledge-map, video, text order.

    Unbatched sequences (e.g. text tokens shared by every clip) are
    broadcast to the batch size of the others.
    """
    seqs = sorted([s for s in seqs if len(s)], key=lambda s: MODALITY_ORDER.index(s.modalities[0]))
    if not seqs:
        raise ContractError("nothing to fuse")
    widths = {s.width for s in seqs}
    if len(widths) > 1:
        raise DimensionError(f"token widths differ across modalities: {sorted(widths)}")
    if len(seqs) == 1:
        out = seqs[0]
    else:
        b = _batch_size(seqs)
        parts = []
        for s in seqs:
            t = s.tokens
            if b is not None and t.ndim == 2:
                t = t + Tensor(np.zeros((b, *t.shape)))
            parts.append(t)
        out = TokenSequence(
            T.concat(parts, axis=-2),
            np.concatenate([s.positions for s in seqs]),
            tuple(m for s in seqs for m in s.modalities),
            np.concatenate([s.frame_starts for s in seqs]),
        )
    if cfg.rope_mode is RopeMode.NON_ALIGNED:
        out = out.with_positions(ordinal_positions([out])[0])
    return out


def pool_mean(seq: TokenSequence) -> Tensor:
    if len(seq) == 0:
        raise ContractError("cannot pool an empty sequence")
    return T.mean(seq.tokens, axis=-2)


class AttentionPooling(Module):
    """One pre-norm self-attention layer with residual, then average pooling."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, out_std=None):
        super().__init__()
        self.ln = LayerNorm(cfg.d_model)
        self.attn = MultiHeadSelfAttention(cfg.d_model, cfg.n_heads, rng, cfg.rope_base, out_std)

    def __call__(self, seq: TokenSequence) -> Tensor:
        if len(seq) == 0:
            raise ContractError("cannot pool an empty sequence")
        x = seq.tokens + self.attn(self.ln(seq.tokens), seq.positions)
        return T.mean(x, axis=-2)


def pool_att(seq: TokenSequence, pool: AttentionPooling) -> Tensor:
    return pool(seq)


class LatentAttentionPooling(Module):
    """Cross-attention between a learnable latent dictionary and the token sequence.

    In the default mode the K latents are queries (no rotary rotation) and the
    tokens provide keys (rotated by their positions) and values. Each latent's
    output passes through a residual GELU MLP and the K outputs are averaged.
    """

    def __init__(self, cfg: EncoderConfig, n_latents: int, rng: np.random.Generator,
                 query_mode: LatentQueryMode = LatentQueryMode.LATENTS):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.rope_base = cfg.rope_base
        self.query_mode = LatentQueryMode(query_mode)
        self.latents = T.parameter(rng.normal(0.0, 0.02, size=(n_latents, d)))
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.mlp = MLP(d, cfg.mlp_ratio * d, rng)
        self.last_attention: np.ndarray | None = None

    def __call__(self, seq: TokenSequence) -> tuple[Tensor, np.ndarray]:
        if len(seq) == 0:
            raise ContractError("cannot pool an empty sequence")
        h = self.n_heads
        if self.query_mode is LatentQueryMode.LATENTS:
            q = _split_heads(self.wq(self.latents), h)  # [H, K, hd]
            k = apply_rope(_split_heads(self.wk(seq.tokens), h), seq.positions, self.rope_base)
            v = _split_heads(self.wv(seq.tokens), h)  # [..., H, N, hd]
        else:
            q = apply_rope(_split_heads(self.wq(seq.tokens), h), seq.positions, self.rope_base)
            k = _split_heads(self.wk(self.latents), h)
            v = _split_heads(self.wv(self.latents), h)
        kt = T.transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))
        probs = T.softmax(T.matmul(q, kt) / np.sqrt(q.shape[-1]), axis=-1)
        out = self.wo(_merge_heads(T.matmul(probs, v)))
        out = out + self.mlp(out)
        self.last_attention = probs.data
        return T.mean(out, axis=-2), probs.data


def pool_latent(seq: TokenSequence, pool: LatentAttentionPooling) -> tuple[Tensor, np.ndarray]:
    """Pooled embedding and attention probabilities ``[..., heads, K, N]``."""
    return pool(seq)


class Classifier(Module):
    def __init__(self, d_model: int, rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        self.fc = Linear(d_model, 2, rng, std=std)

    def __call__(self, embedding: Tensor) -> Tensor:
        if embedding.shape[-1] != self.fc.weight.shape[0]:
            raise DimensionError(f"embedding width {embedding.shape[-1]} != {self.fc.weight.shape[0]}")
        return self.fc(embedding)


def classify(embedding: Tensor, head: Classifier) -> Tensor:
    return head(embedding)


def probabilities(logits) -> np.ndarray:
    z = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(logits) -> tuple[list[Label], np.ndarray]:
    """Labels and positive-class probabilities; exact ties go to negative."""
    p = probabilities(logits)
    p2 = p.reshape(-1, 2)
    labels = [Label.POSITIVE if row[1] > row[0] else Label.NEGATIVE for row in p2]
    return labels, p2[:, 1]
