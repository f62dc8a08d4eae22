"""Modality encoders: patch embeddings, text embeddings, rotary attention, transformer blocks.

Knowledge-map and video encoders share one transformer design and differ
only in their patch embedding: both cut the clip into 8-frame temporal
blocks, so token ``j`` of either modality covers frames ``[8j, 8j + 8)``
and carries position ``8j`` on the shared frame clock.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, PromptLookupError
from .layers import MLP, LayerNorm, Linear, Module
from .pose_io import CLIP_FRAMES
from .tensor import Tensor

TEXT_DIM = 384
DEFAULT_PROMPTS = (
    "asymmetric arm swing in thoracic curve types",
    "shoulder height asymmetry during walking",
    "pelvic obliquity with lateral trunk shift",
    "reduced left right limb coordination",
)


class Modality(str, enum.Enum):
    KNOWLEDGE_MAP = "knowledge_map"
    VIDEO = "video"
    TEXT = "text"


MODALITY_ORDER = (Modality.KNOWLEDGE_MAP, Modality.VIDEO, Modality.TEXT)


class RopeMode(str, enum.Enum):
    ALIGNED = "aligned"
    NON_ALIGNED = "non-aligned"


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    mlp_ratio: int = 4
    patch_frames: int = 8
    rope_base: float = 10000.0
    rope_mode: RopeMode = RopeMode.ALIGNED

    def __post_init__(self):
        self.rope_mode = RopeMode(self.rope_mode)
        if self.d_model < 1 or self.n_heads < 1 or self.n_layers < 0 or self.mlp_ratio < 1:
            raise ConfigError("d_model, n_heads, mlp_ratio must be positive and n_layers >= 0")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary pairing")
        if self.patch_frames < 1 or CLIP_FRAMES % self.patch_frames:
            raise ConfigError(f"{CLIP_FRAMES} frames are not divisible by patch_frames {self.patch_frames}")
        if self.rope_base <= 0:
            raise ConfigError("rope_base must be > 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_patches(self) -> int:
        return CLIP_FRAMES // self.patch_frames

    def to_json(self) -> dict:
        d = asdict(self)
        d["rope_mode"] = self.rope_mode.value
        return d


@dataclass
class TokenSequence:
    """Tokens ``[..., N, d]`` with per-token rotary positions and provenance.

    ``frame_starts`` keeps each token's first frame (-1 for text) regardless
    of the rotary mode, so attention can always be mapped back to time.
    """

    tokens: Tensor
    positions: np.ndarray
    modalities: tuple[Modality, ...]
    frame_starts: np.ndarray = field(default=None)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        n = self.tokens.shape[-2] if self.tokens.ndim >= 2 else 0
        if self.positions.shape != (n,) or len(self.modalities) != n:
            raise DimensionError(f"{n} tokens but {len(self.positions)} positions / {len(self.modalities)} modalities")
        if self.frame_starts is None:
            self.frame_starts = self.positions.copy()
        self.frame_starts = np.asarray(self.frame_starts, dtype=np.int64)

    def __len__(self):
        return len(self.positions)

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.positions, self.modalities, self.frame_starts)

    def with_positions(self, positions) -> "TokenSequence":
        return TokenSequence(self.tokens, positions, self.modalities, self.frame_starts)


# -- patch embeddings ---------------------------------------------------------------
class PatchEmbedding(Module):
    """Linear projection of flattened ``patch_frames``-frame temporal blocks."""

    def __init__(self, frame_width: int, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.frame_width = frame_width
        self.patch_frames = cfg.patch_frames
        self.proj = Linear(cfg.patch_frames * frame_width, cfg.d_model, rng)

    def __call__(self, frames: np.ndarray, modality: Modality) -> TokenSequence:
        x = np.asarray(frames, dtype=np.float64)
        batched = x.ndim == 3
        if not batched:
            x = x[None]
        if x.shape[1:] != (CLIP_FRAMES, self.frame_width):
            raise DimensionError(
                f"{modality.value} patch embedding expects [{CLIP_FRAMES}, {self.frame_width}] per clip, got {list(x.shape[1:])}"
            )
        n = CLIP_FRAMES // self.patch_frames
        blocks = Tensor(x.reshape(x.shape[0], n, self.patch_frames * self.frame_width))
        tokens = self.proj(blocks)
        if not batched:
            tokens = tokens[0]
        starts = np.arange(n) * self.patch_frames
        return TokenSequence(tokens, starts, (modality,) * n, starts)

    def weight_column_norms(self) -> np.ndarray:
        """L2 norm of each input cell's embedding weights, shaped ``[patch_frames, frame_width]``."""
        w = self.proj.weight.data  # [P * width, d]
        return np.linalg.norm(w, axis=1).reshape(self.patch_frames, self.frame_width)


def patch_embed_map(values, embed: PatchEmbedding) -> TokenSequence:
    """12 tokens from a standardised ``[96, 238]`` map (or a ``[B, 96, 238]`` batch)."""
    values = getattr(values, "values", values)
    return embed(values, Modality.KNOWLEDGE_MAP)


def patch_embed_video(frames, embed: PatchEmbedding) -> TokenSequence:
    """12 tokens from ``[96, 32, 32]`` silhouettes (or a ``[B, 96, 32, 32]`` batch)."""
    frames = np.asarray(frames, dtype=np.float64)
    lead = frames.shape[:-2]
    return embed(frames.reshape(*lead, frames.shape[-2] * frames.shape[-1]), Modality.VIDEO)


# -- text ---------------------------------------------------------------------------
_WORD = re.compile(r"[a-z0-9]+")


def fallback_text_vector(prompt: str, seed: int = 0, dim: int = TEXT_DIM) -> np.ndarray:
    """Seeded hashed bag-of-words, L2-normalised."""
    words = _WORD.findall(prompt.lower()) or [""]
    vec = np.zeros(dim)
    for w in words:
        digest = hashlib.blake2b(f"{seed}:{w}".encode(), digest_size=8).digest()
        vec += np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(dim)
    return vec / np.linalg.norm(vec)


class TextEmbeddingProvider:
    """Sentence vectors from a JSON file ``{prompt: [384 floats]}`` or the hashed fallback."""

    def __init__(self, vectors: dict[str, np.ndarray] | None = None, seed: int = 0, source: str | None = None):
        self.vectors = vectors
        self.seed = seed
        self.source = source

    @classmethod
    def from_file(cls, path) -> "TextEmbeddingProvider":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        vectors = {}
        for prompt, vec in raw.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (TEXT_DIM,):
                raise DimensionError(f"embedding for {prompt!r} has shape {list(arr.shape)}, expected [{TEXT_DIM}]")
            vectors[prompt] = arr
        return cls(vectors, source=str(path))

    def __call__(self, prompt: str) -> np.ndarray:
        if self.vectors is None:
            return fallback_text_vector(prompt, self.seed)
        if prompt not in self.vectors:
            raise PromptLookupError(prompt)
        return self.vectors[prompt]

    def embed_all(self, prompts) -> np.ndarray:
        return np.stack([self(p) for p in prompts]) if prompts else np.zeros((0, TEXT_DIM))


def embed_text(prompts, provider: TextEmbeddingProvider, projection: Linear) -> TokenSequence:
    """One token per prompt at position 0."""
    vecs = provider.embed_all(list(prompts))
    tokens = projection(Tensor(vecs)) if len(vecs) else Tensor(np.zeros((0, projection.weight.shape[1])))
    n = len(vecs)
    return TokenSequence(tokens, np.zeros(n, dtype=np.int64), (Modality.TEXT,) * n, np.full(n, -1))


# -- rotary embeddings ----------------------------------------------------------------
def rope_angles(positions, head_dim: int, base: float = 10000.0) -> np.ndarray:
    """Rotation angle of each coordinate pair: ``pos * base**(-2i / head_dim)``, shape [N, head_dim/2]."""
    if head_dim % 2:
        raise ConfigError(f"head_dim {head_dim} must be even for rotary pairing")
    inv_freq = base ** (-np.arange(0, head_dim, 2) / head_dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def _pair_swap(head_dim: int) -> np.ndarray:
    """Matrix S with (x @ S) = (-x1, x0, -x3, x2, ...)."""
    s = np.zeros((head_dim, head_dim))
    for i in range(0, head_dim, 2):
        s[i + 1, i] = -1.0
        s[i, i + 1] = 1.0
    return s


def apply_rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate consecutive coordinate pairs of ``x [..., N, head_dim]`` by their position angles."""
    head_dim = x.shape[-1]
    ang = np.repeat(rope_angles(positions, head_dim, base), 2, axis=1)  # [N, head_dim]
    return x * np.cos(ang) + T.matmul(x, Tensor(_pair_swap(head_dim))) * np.sin(ang)


def ordinal_positions(seqs) -> list[np.ndarray]:
    """Positions 0..N-1 over the fused (concatenated) layout, split back per sequence."""
    out, offset = [], 0
    for s in seqs:
        out.append(np.arange(offset, offset + len(s)))
        offset += len(s)
    return out


def rope_positions(seqs, mode: RopeMode) -> list[TokenSequence]:
    """Aligned keeps each sequence's frame clock; non-aligned uses fused ordinals."""
    if RopeMode(mode) is RopeMode.ALIGNED:
        return list(seqs)
    return [s.with_positions(p) for s, p in zip(seqs, ordinal_positions(seqs))]


# -- attention + blocks -----------------------------------------------------------------
def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, d = x.shape
    return T.transpose(x.reshape(*lead, n, n_heads, d // n_heads), (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, hd = x.shape
    k = len(lead)
    return T.transpose(x, (*range(k), k + 1, k, k + 2)).reshape(*lead, n, h * hd)


class MultiHeadSelfAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, rope_base: float = 10000.0, out_std=None):
        super().__init__()
        self.n_heads = n_heads
        self.rope_base = rope_base
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng, std=out_std)
        self.last_attention: np.ndarray | None = None

    def __call__(self, x: Tensor, positions) -> Tensor:
        q = apply_rope(_split_heads(self.wq(x), self.n_heads), positions, self.rope_base)
        k = apply_rope(_split_heads(self.wk(x), self.n_heads), positions, self.rope_base)
        v = _split_heads(self.wv(x), self.n_heads)
        scores = T.matmul(q, T.transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))) / np.sqrt(q.shape[-1])
        probs = T.softmax(scores, axis=-1)
        self.last_attention = probs.data
        return self.wo(_merge_heads(T.matmul(probs, v)))


class TransformerBlock(Module):
    """Pre-norm: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, out_std=None):
        super().__init__()
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadSelfAttention(cfg.d_model, cfg.n_heads, rng, cfg.rope_base, out_std)
        self.ln2 = LayerNorm(cfg.d_model)
        self.mlp = MLP(cfg.d_model, cfg.mlp_ratio * cfg.d_model, rng, out_std)

    def __call__(self, x: Tensor, positions) -> Tensor:
        x = x + self.attn(self.ln1(x), positions)
        return x + self.mlp(self.ln2(x))


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        out_std = 1.0 / np.sqrt(cfg.d_model * 2 * max(cfg.n_layers, 1))
        self.blocks = [TransformerBlock(cfg, rng, out_std) for _ in range(cfg.n_layers)]

    def __call__(self, seq: TokenSequence) -> TokenSequence:
        x = seq.tokens
        for block in self.blocks:
            x = block(x, seq.positions)
        return seq.with_tokens(x)


def encode(seq: TokenSequence, encoder: Encoder) -> TokenSequence:
    """Run ``seq`` through the encoder's blocks; positions pass through unchanged."""
    return encoder(seq)
