"""Map latent-pooling attention back onto the knowledge map and report top features.

The time axis comes straight from attention: each knowledge-map token owns
an 8-frame window. Within a token, mass is spread over its ``8 x 238`` cells
in proportion to ``|input value| x ||embedding weight row||``, the cell's
share of a linear patch projection.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .encoders import Modality
from .errors import ContractError, ExplainUnsupportedError
from .knowledge_map import DOMAIN_BLOCKS, FEATURE_SCHEMA, N_FEATURES, Domain, NormStats, apply_norm
from .pooling_fusion import LatentQueryMode, Variant, predict
from .pose_io import CLIP_FRAMES, Label

SUM_TOL = 1e-9
DEFAULT_TOP_K = 5


@dataclass
class HeatMap:
    values: np.ndarray  # [96, 238]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (CLIP_FRAMES, N_FEATURES):
            raise ContractError(f"heat map must be [{CLIP_FRAMES}, {N_FEATURES}], got {list(self.values.shape)}")
        if np.any(self.values < 0) or abs(self.values.sum() - 1.0) > SUM_TOL:
            raise ContractError("heat map must be non-negative and sum to 1")


def remap_attention(attention, modalities, frame_starts, map_values, weight_norms, patch_frames: int = 8) -> HeatMap:
    """Heat over (frame, feature) cells from latent attention ``[heads, K, N]``.

    ``modalities`` and ``frame_starts`` describe the N fused tokens;
    ``map_values`` is the standardised ``[96, 238]`` input and
    ``weight_norms`` the ``[patch_frames, 238]`` embedding row norms.
    """
    att = np.asarray(attention, dtype=np.float64)
    if att.ndim != 3 or att.shape[-1] != len(modalities):
        raise ContractError(f"attention must be [heads, K, {len(modalities)}], got {list(att.shape)}")
    km = np.array([m is Modality.KNOWLEDGE_MAP for m in modalities])
    if not km.any():
        raise ExplainUnsupportedError("no knowledge-map tokens to explain")
    relevance = att.mean(axis=(0, 1))[km]
    total = relevance.sum()
    relevance = relevance / total if total > 0 else np.full(len(relevance), 1.0 / len(relevance))
    x = np.abs(np.asarray(map_values, dtype=np.float64))
    w = np.asarray(weight_norms, dtype=np.float64)
    heat = np.zeros((CLIP_FRAMES, N_FEATURES))
    for r, start in zip(relevance, np.asarray(frame_starts)[km]):
        cells = x[start : start + patch_frames] * w
        s = cells.sum()
        cells = cells / s if s > 0 else np.full(cells.shape, 1.0 / cells.size)
        heat[start : start + patch_frames] += r * cells
    return HeatMap(heat)


@dataclass
class RankedFeature:
    name: str
    column: int
    window: tuple[int, int]  # frames [start, end)
    score: float

    def to_json(self) -> dict:
        return {"name": self.name, "column": self.column, "window": list(self.window), "score": self.score}


def _peak_window(col: np.ndarray, patch_frames: int) -> tuple[int, int]:
    sums = col.reshape(-1, patch_frames).sum(axis=1)
    j = int(np.argmax(sums))  # first maximum
    return j * patch_frames, (j + 1) * patch_frames


def _rank_columns(heat: np.ndarray, columns: np.ndarray, k: int, patch_frames: int) -> list[RankedFeature]:
    scores = heat[:, columns].sum(axis=0)
    order = np.lexsort((columns, -scores))[:k]
    return [
        RankedFeature(FEATURE_SCHEMA[c].name, int(c), _peak_window(heat[:, c], patch_frames), float(scores[i]))
        for i, c in ((i, columns[i]) for i in order)
    ]


def top_features(heat: HeatMap | np.ndarray, k: int = DEFAULT_TOP_K, patch_frames: int = 8) -> dict[Domain, list[RankedFeature]]:
    """Per domain, the ``k`` columns with the most heat; ties go to the lower column."""
    if k < 1:
        raise ContractError("k must be >= 1")
    h = getattr(heat, "values", np.asarray(heat))
    return {d: _rank_columns(h, np.arange(lo, hi), k, patch_frames) for d, (lo, hi) in DOMAIN_BLOCKS.items()}


def top_overall(heat: HeatMap | np.ndarray, k: int = 10, patch_frames: int = 8) -> list[RankedFeature]:
    """The ``k`` highest-heat columns regardless of domain."""
    h = getattr(heat, "values", np.asarray(heat))
    return _rank_columns(h, np.arange(h.shape[1]), k, patch_frames)


@dataclass
class ExplainReport:
    clip_id: str
    heat: HeatMap
    top_features: dict[Domain, list[RankedFeature]]
    prediction: Label
    probability: float  # positive class
    token_relevance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    latent_relevance: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # [K, n_map_tokens]

    def to_json(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "prediction": self.prediction.value,
            "probability_positive": self.probability,
            "top_features": {d.value: [f.to_json() for f in fs] for d, fs in self.top_features.items()},
            "token_relevance": self.token_relevance.tolist(),
            "latent_relevance": self.latent_relevance.tolist(),
            "heat": self.heat.values.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ExplainReport":
        tops = {
            Domain(name): [RankedFeature(f["name"], f["column"], tuple(f["window"]), f["score"]) for f in fs]
            for name, fs in d["top_features"].items()
        }
        return cls(
            d["clip_id"], HeatMap(np.array(d["heat"])), tops, Label(d["prediction"]), d["probability_positive"],
            np.array(d["token_relevance"], dtype=np.float64), np.array(d["latent_relevance"], dtype=np.float64),
        )


def explain_clip(model, clip, norm: NormStats | None, k: int = DEFAULT_TOP_K) -> ExplainReport:
    """Run ``model`` on one prepared clip and explain its latent-pooling attention."""
    fusion = model.cfg.fusion
    if fusion.variant is not Variant.CAT_LATENT:
        raise ExplainUnsupportedError(f"variant {fusion.variant.value} has no latent attention to remap")
    if fusion.query_mode is not LatentQueryMode.LATENTS:
        raise ExplainUnsupportedError("attention remapping needs latents as queries")
    if Modality.KNOWLEDGE_MAP not in fusion.modalities:
        raise ExplainUnsupportedError("no knowledge-map tokens to explain")
    values = clip.kmap.values if norm is None else apply_norm(clip.kmap, norm).values
    video = None if clip.video is None else np.asarray(clip.video, dtype=np.float64)[None]
    out = model(values[None], video if hasattr(model, "video_embed") else None)
    att = out.attention[0]
    heat = remap_attention(att, out.fused.modalities, out.fused.frame_starts, values,
                           model.map_embed.weight_column_norms(), model.cfg.encoder.patch_frames)
    labels, probs = predict(out.logits)
    km = np.array([m is Modality.KNOWLEDGE_MAP for m in out.fused.modalities])
    per_latent = att.mean(axis=0)[:, km]
    rel = per_latent.mean(axis=0)
    return ExplainReport(clip.clip_id, heat, top_features(heat, k, model.cfg.encoder.patch_frames), labels[0],
                         float(probs[0]), rel / rel.sum(), per_latent / per_latent.sum(axis=1, keepdims=True))


# -- rendering ------------------------------------------------------------------------
_CELL_W, _CELL_H = 4, 2
_LEFT, _TOP = 110, 20
_DOMAIN_FILL = {Domain.MOTION: "#eef3fb", Domain.SELF_SKELETON: "#eefbf0", Domain.CROSS_CORRELATION: "#fbf3ee"}


def _colour(v: float) -> str:
    # white to dark red
    v = min(max(v, 0.0), 1.0)
    return "#%02x%02x%02x" % (255 - int(120 * v), 255 - int(235 * v), 255 - int(235 * v))


def render_svg(report: ExplainReport) -> str:
    heat = report.heat.values
    scale = heat.max() or 1.0
    levels = np.round(heat / scale * 31).astype(int)
    width = _LEFT + CLIP_FRAMES * _CELL_W + 10
    height = _TOP + N_FEATURES * _CELL_H + 30
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
        f'<title>{escape(report.clip_id)}</title>',
    ]
    for d, (lo, hi) in DOMAIN_BLOCKS.items():
        y0 = _TOP + lo * _CELL_H
        out.append(
            f'<g class="domain-band" data-domain="{d.value}">'
            f'<rect x="0" y="{y0}" width="{_LEFT - 4}" height="{(hi - lo) * _CELL_H}" fill="{_DOMAIN_FILL[d]}"/>'
            f'<text x="4" y="{y0 + 12}" font-size="10">{escape(d.value)}</text></g>'
        )
    out.append('<g class="heat">')
    for f in range(N_FEATURES):
        t = 0
        while t < CLIP_FRAMES:
            end = t
            while end < CLIP_FRAMES and levels[end, f] == levels[t, f]:
                end += 1
            if levels[t, f] > 0:
                out.append(
                    f'<rect x="{_LEFT + t * _CELL_W}" y="{_TOP + f * _CELL_H}" width="{(end - t) * _CELL_W}" '
                    f'height="{_CELL_H}" fill="{_colour(levels[t, f] / 31)}"/>'
                )
            t = end
    out.append("</g>")
    for lo, _ in list(DOMAIN_BLOCKS.values())[1:]:
        y = _TOP + lo * _CELL_H
        out.append(f'<line class="domain-separator" x1="0" y1="{y}" x2="{width}" y2="{y}" stroke="black"/>')
    for d, feats in report.top_features.items():
        for feat in feats:
            s, e = feat.window
            out.append(
                f'<rect class="top-cell" data-domain="{d.value}" data-feature="{escape(feat.name)}" '
                f'x="{_LEFT + s * _CELL_W}" y="{_TOP + feat.column * _CELL_H}" width="{(e - s) * _CELL_W}" '
                f'height="{_CELL_H}" fill="none" stroke="#0050ff" stroke-width="1"/>'
            )
    out.append(f'<text x="{_LEFT}" y="{height - 8}" font-size="10">time (frames 0-{CLIP_FRAMES})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_heat_csv(heat: HeatMap, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([d.name for d in FEATURE_SCHEMA])
        for row in heat.values:
            w.writerow([repr(float(v)) for v in row])


def render_report(report: ExplainReport, out_dir, stem: str | None = None) -> dict[str, Path]:
    """Write ``<stem>.json``, ``<stem>.csv`` and ``<stem>.svg`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or report.clip_id.replace("#", "_")
    paths = {ext: out_dir / f"{stem}.{ext}" for ext in ("json", "csv", "svg")}
    paths["json"].write_text(json.dumps(report.to_json(), sort_keys=True) + "\n", encoding="utf-8")
    write_heat_csv(report.heat, paths["csv"])
    paths["svg"].write_text(render_svg(report), encoding="utf-8")
    return paths
