"""Full screening model: per-modality encoders, fusion, pooling and classifier head."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .encoders import (
    DEFAULT_PROMPTS,
    TEXT_DIM,
    Encoder,
    EncoderConfig,
    Modality,
    PatchEmbedding,
    TextEmbeddingProvider,
    TokenSequence,
    embed_text,
    patch_embed_map,
    patch_embed_video,
    rope_positions,
)
from .errors import ConfigError
from .knowledge_map import N_FEATURES, NormStats
from .layers import Linear, Module
from .pooling_fusion import (
    AttentionPooling,
    Classifier,
    FusionConfig,
    LatentAttentionPooling,
    Variant,
    fuse,
    pool_mean,
)
from .synth_gait import SILHOUETTE_SIZE
from .tensor import Tensor

SINGLE_MODALITY_LAYERS = 8
MULTI_MODALITY_LAYERS = 4


def default_layers(n_modalities: int) -> int:
    return SINGLE_MODALITY_LAYERS if n_modalities == 1 else MULTI_MODALITY_LAYERS


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    prompts: tuple[str, ...] = DEFAULT_PROMPTS
    text_seed: int = 0
    silhouette_size: int = SILHOUETTE_SIZE

    def __post_init__(self):
        if self.encoder.rope_mode is not self.fusion.rope_mode:
            raise ConfigError(
                f"encoder rope_mode {self.encoder.rope_mode.value} != fusion rope_mode {self.fusion.rope_mode.value}"
            )
        self.prompts = tuple(self.prompts)
        if Modality.TEXT in self.fusion.modalities and not self.prompts:
            raise ConfigError("text modality selected but no prompts given")

    @classmethod
    def build(cls, variant="cat-latent", rope_mode="aligned", modalities=None, n_layers=None, **enc) -> "ModelConfig":
        fusion = FusionConfig(variant=variant, rope_mode=rope_mode,
                              **({"modalities": tuple(modalities)} if modalities else {}),
                              **{k: enc.pop(k) for k in ("n_latents", "query_mode") if k in enc})
        n_temporal = sum(m is not Modality.TEXT for m in fusion.modalities)
        layers = n_layers if n_layers is not None else default_layers(max(n_temporal, len(fusion.modalities)))
        return cls(encoder=EncoderConfig(n_layers=layers, rope_mode=rope_mode, **enc), fusion=fusion)

    def to_json(self) -> dict:
        return {
            "encoder": self.encoder.to_json(),
            "fusion": self.fusion.to_json(),
            "prompts": list(self.prompts),
            "text_seed": self.text_seed,
            "silhouette_size": self.silhouette_size,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = {"encoder", "fusion", "prompts", "text_seed", "silhouette_size"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        try:
            enc = EncoderConfig(**d.get("encoder", {}))
            fus = FusionConfig(**d.get("fusion", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(enc, fus, tuple(d.get("prompts", DEFAULT_PROMPTS)), int(d.get("text_seed", 0)),
                   int(d.get("silhouette_size", SILHOUETTE_SIZE)))


@dataclass
class ForwardResult:
    logits: Tensor
    fused: TokenSequence
    attention: np.ndarray | None  # latent pooling probabilities [B, H, K, N]


class ScreeningModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, text_provider: TextEmbeddingProvider | None = None):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ec, mods = cfg.encoder, cfg.fusion.modalities
        self.text_provider = text_provider or TextEmbeddingProvider(seed=cfg.text_seed)
        if Modality.KNOWLEDGE_MAP in mods:
            self.map_embed = PatchEmbedding(N_FEATURES, ec, rng)
            self.map_encoder = Encoder(ec, rng)
        if Modality.VIDEO in mods:
            self.video_embed = PatchEmbedding(cfg.silhouette_size ** 2, ec, rng)
            self.video_encoder = Encoder(ec, rng)
        if Modality.TEXT in mods:
            self.text_proj = Linear(TEXT_DIM, ec.d_model, rng)
        variant = cfg.fusion.variant
        if variant is Variant.CAT_LATENT:
            self.pool = LatentAttentionPooling(ec, cfg.fusion.n_latents, rng, cfg.fusion.query_mode)
        elif variant is Variant.CAT_ATT:
            self.pool = AttentionPooling(ec, rng)
        self.head = Classifier(ec.d_model, rng)

    @property
    def modalities(self):
        return self.cfg.fusion.modalities

    def token_sequences(self, maps=None, videos=None) -> list[TokenSequence]:
        """Embedded, position-assigned and encoded sequences in fusion order.

        Non-aligned mode assigns fused ordinals before encoding so each
        encoder sees the same positions the pooling layer will.
        """
        mods = self.modalities
        seqs, encoders = [], []
        if Modality.KNOWLEDGE_MAP in mods:
            seqs.append(patch_embed_map(maps, self.map_embed))
            encoders.append(self.map_encoder)
        if Modality.VIDEO in mods:
            seqs.append(patch_embed_video(videos, self.video_embed))
            encoders.append(self.video_encoder)
        if Modality.TEXT in mods:
            seqs.append(embed_text(self.cfg.prompts, self.text_provider, self.text_proj))
            encoders.append(None)
        seqs = rope_positions(seqs, self.cfg.fusion.rope_mode)
        return [enc(s) if enc is not None else s for s, enc in zip(seqs, encoders)]

    def forward(self, maps=None, videos=None) -> ForwardResult:
        """``maps [B, 96, 238]`` standardised, ``videos [B, 96, s, s]``; either may be omitted if unused."""
        mods = self.modalities
        if Modality.KNOWLEDGE_MAP in mods and maps is None:
            raise ConfigError("model uses the knowledge map but none was given")
        if Modality.VIDEO in mods and videos is None:
            raise ConfigError("model uses video but none was given")
        seqs = self.token_sequences(maps, videos)
        fused = fuse(seqs, self.cfg.fusion)
        attention = None
        if self.cfg.fusion.variant is Variant.CAT_LATENT:
            emb, attention = self.pool(fused)
        elif self.cfg.fusion.variant is Variant.CAT_ATT:
            emb = self.pool(fused)
        else:
            emb = pool_mean(fused)
        return ForwardResult(self.head(emb), fused, attention)

    __call__ = forward


def save_model(model: ScreeningModel, out_dir, norm: NormStats | None = None, extra: dict | None = None) -> Path:
    """Write ``weights.gmlb`` + ``config.json`` (+ ``norm.json``) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "weights.gmlb", model.state_dict())
    meta = {"model": model.cfg.to_json(), **(extra or {})}
    (out / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if norm is not None:
        (out / "norm.json").write_text(json.dumps(norm.to_json(), sort_keys=True) + "\n")
    return out


def load_model(model_dir, text_provider: TextEmbeddingProvider | None = None):
    """Returns ``(model, norm_stats_or_None, config_metadata)``."""
    d = Path(model_dir)
    meta = json.loads((d / "config.json").read_text())
    cfg = ModelConfig.from_json(meta["model"])
    model = ScreeningModel(cfg, text_provider=text_provider)
    model.load_state_dict(load_checkpoint(d / "weights.gmlb"))
    norm = None
    if (d / "norm.json").exists():
        norm = NormStats.from_json(json.loads((d / "norm.json").read_text()))
    return model, norm, meta
