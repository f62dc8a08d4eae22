"""Clip preparation, subject-disjoint splitting, training loop and screening metrics."""

from __future__ import annotations

import csv
import math
import enum
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, LeakageError, NumericError, SplitError
from .knowledge_map import KnowledgeMap, NormStats, apply_norm, extract, fit_norm_stats
from .layers import Adam
from .model import ScreeningModel
from .pooling_fusion import predict
from .pose_io import (
    CLIP_FRAMES,
    DEFAULT_CONF_THRESHOLD,
    Label,
    Manifest,
    interpolate_missing,
    load_pose_jsonl,
    segment_clips,
)
from .synth_gait import SILHOUETTE_SIZE, load_video, rasterize_frames, video_path_for

log = logging.getLogger(__name__)


# -- clip preparation -------------------------------------------------------------------
@dataclass
class ClipRecord:
    clip_id: str
    subject_id: str
    label: Label
    cobb_angle: float | None
    kmap: KnowledgeMap  # raw, un-normalised
    video: np.ndarray | None  # [96, s, s] float32


def prepare_clips(manifest: Manifest, with_video: bool = True, conf_threshold: float = DEFAULT_CONF_THRESHOLD,
                  silhouette_size: int = SILHOUETTE_SIZE) -> list[ClipRecord]:
    """Load, gap-fill, segment and featurise every pose file in ``manifest``.

    Silhouettes come from the ``.gmvf`` sibling when one exists, otherwise
    they are rasterised from the gap-filled keypoints.
    """
    records = []
    for entry in manifest.entries:
        path = manifest.resolve(entry)
        seq = interpolate_missing(load_pose_jsonl(path, subject_id=entry.subject_id), conf_threshold)
        clips = segment_clips(seq, entry.label, entry.cobb_angle)
        video = None
        if with_video:
            vpath = video_path_for(path)
            if vpath.exists():
                video = load_video(vpath).astype(np.float32)
                if video.shape[0] < len(clips) * CLIP_FRAMES or video.shape[1:] != (silhouette_size,) * 2:
                    raise ContractError(f"{vpath}: silhouette shape {list(video.shape)} does not match {path}")
        for k, clip in enumerate(clips):
            sl = slice(k * CLIP_FRAMES, (k + 1) * CLIP_FRAMES)
            if not with_video:
                frames = None
            elif video is not None:
                frames = video[sl]
            else:
                frames = rasterize_frames(clip.keypoints, silhouette_size).astype(np.float32)
            records.append(ClipRecord(f"{path.stem}#{k}", entry.subject_id, entry.label, entry.cobb_angle,
                                      extract(clip), frames))
    return records


# -- splitting ------------------------------------------------------------------------
class SplitResult(NamedTuple):
    train: Manifest
    test: Manifest
    warnings: list[str]


def _subject_labels(manifest: Manifest) -> dict[str, Label]:
    labels: dict[str, Label] = {}
    for e in manifest.entries:
        if labels.setdefault(e.subject_id, e.label) is not e.label:
            raise SplitError(f"subject {e.subject_id} carries both labels")
    return labels


def _largest_remainder(sizes: list[int], total: int) -> list[int]:
    n = sum(sizes)
    quotas = [s * total / n for s in sizes]
    alloc = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def split_subject_disjoint(manifest: Manifest, test_fraction: float = 0.3, seed: int = 0) -> SplitResult:
    """Partition subjects (never clips), stratified by label, deterministic in ``seed``."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    labels = _subject_labels(manifest)
    subjects = sorted(labels)
    if len(subjects) < 2:
        raise SplitError(f"need at least two subjects to split, got {len(subjects)}")
    n_test = min(max(int(round(test_fraction * len(subjects))), 1), len(subjects) - 1)
    rng = np.random.default_rng(seed)
    groups = [[s for s in subjects if labels[s] is lab] for lab in (Label.NEGATIVE, Label.POSITIVE)]
    test: set[str] = set()
    for group, k in zip(groups, _largest_remainder([len(g) for g in groups], n_test)):
        if group:
            test.update(group[i] for i in rng.permutation(len(group))[:k])
    warnings = []
    for lab, group in zip((Label.NEGATIVE, Label.POSITIVE), groups):
        n_in_test = sum(s in test for s in group)
        if n_in_test == 0:
            warnings.append(f"label {lab.value} absent from the test split")
        if n_in_test == len(group):
            warnings.append(f"label {lab.value} absent from the train split")
    for w in warnings:
        log.warning(w)
    train_entries = [e for e in manifest.entries if e.subject_id not in test]
    test_entries = [e for e in manifest.entries if e.subject_id in test]
    return SplitResult(Manifest(train_entries, manifest.root), Manifest(test_entries, manifest.root), warnings)


def check_subject_disjoint(train_subjects, test_subjects) -> None:
    overlap = set(train_subjects) & set(test_subjects)
    if overlap:
        raise LeakageError(sorted(overlap))


# -- batching -------------------------------------------------------------------------
def stack_inputs(clips: list[ClipRecord], norm: NormStats | None, with_video: bool = True):
    maps = np.stack([clip.kmap.values if norm is None else apply_norm(clip.kmap, norm).values for clip in clips])
    videos = np.stack([clip.video for clip in clips]).astype(np.float64) if with_video else None
    labels = np.array([clip.label.index for clip in clips], dtype=np.int64)
    return maps, videos, labels


# -- training ---------------------------------------------------------------------------
class ClassWeighting(str, enum.Enum):
    NONE = "none"
    INVERSE_FREQUENCY = "inverse_frequency"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    class_weighting: ClassWeighting = ClassWeighting.INVERSE_FREQUENCY

    def __post_init__(self):
        self.class_weighting = ClassWeighting(self.class_weighting)
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["class_weighting"] = self.class_weighting.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float


@dataclass
class TrainResult:
    model: ScreeningModel
    norm: NormStats
    history: list[EpochRecord] = field(default_factory=list)


def class_weights(labels: np.ndarray, mode: ClassWeighting) -> np.ndarray:
    """Per-class weights ``n / (2 n_c)``; absent classes get 0."""
    if ClassWeighting(mode) is ClassWeighting.NONE:
        return np.ones(2)
    counts = np.bincount(labels, minlength=2).astype(np.float64)
    return np.where(counts > 0, len(labels) / (2.0 * np.maximum(counts, 1)), 0.0)


def train(model: ScreeningModel, clips: list[ClipRecord], cfg: TrainConfig, norm: NormStats | None = None) -> TrainResult:
    """Adam on class-weighted cross-entropy.

    ``norm`` defaults to statistics fitted on ``clips`` (the training split).
    ``history[0]`` is the weighted loss over all of ``clips`` at initialisation;
    entry ``e >= 1`` holds the mean batch loss of epoch ``e`` and the accuracy
    of the predictions made during it, before each batch's update.
    """
    if not clips:
        raise ContractError("cannot train on an empty clip list")
    if norm is None:
        norm = fit_norm_stats([c.kmap for c in clips])
    with_video = hasattr(model, "video_embed")
    maps, videos, labels = stack_inputs(clips, norm, with_video)
    weights = class_weights(labels, cfg.class_weighting)
    opt = Adam(model.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    init_loss, init_acc = _dataset_loss(model, maps, videos, labels, weights, cfg.batch_size)
    history = [EpochRecord(0, init_loss, init_acc)]
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(clips))
        losses, correct = [], 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            try:
                out = model(maps[idx], videos[idx] if with_video else None)
                loss = T.cross_entropy(out.logits, labels[idx], weights[labels[idx]])
                loss.backward()
                opt.step()
            except NumericError as exc:
                raise NumericError(f"non-finite value at epoch {epoch} step {step} (batch of {len(idx)}): {exc}") from exc
            losses.append(loss.item())
            correct += int(np.sum(np.argmax(out.logits.data, axis=-1) == labels[idx]))
            step += 1
        rec = EpochRecord(epoch, float(np.mean(losses)), correct / len(clips))
        history.append(rec)
        log.info("epoch %d loss %.4f train_acc %.3f", rec.epoch, rec.loss, rec.train_acc)
    return TrainResult(model, norm, history)


def _dataset_loss(model, maps, videos, labels, weights, batch_size):
    """Weighted cross-entropy and accuracy over a whole array set, no update."""
    logits = np.concatenate([
        model(maps[i : i + batch_size], None if videos is None else videos[i : i + batch_size]).logits.data
        for i in range(0, len(labels), batch_size)
    ])
    z = logits - logits.max(axis=1, keepdims=True)
    ce = np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(labels)), labels]
    w = weights[labels]
    loss = float(np.sum(w * ce) / np.sum(w))
    if not math.isfinite(loss):
        raise NumericError("non-finite loss at initialisation (before epoch 1)")
    return loss, float(np.mean(np.argmax(logits, axis=1) == labels))


def write_loss_csv(history: list[EpochRecord], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_acc"])
        for r in history:
            w.writerow([r.epoch, repr(r.loss), repr(r.train_acc)])


# -- inference + metrics -------------------------------------------------------------------
def predict_clips(model: ScreeningModel, clips: list[ClipRecord], norm: NormStats | None, batch_size: int = 32):
    """Labels, positive-class probabilities and logits ``[n, 2]`` for ``clips``."""
    with_video = hasattr(model, "video_embed")
    logits = []
    for start in range(0, len(clips), batch_size):
        maps, videos, _ = stack_inputs(clips[start : start + batch_size], norm, with_video)
        logits.append(model(maps, videos).logits.data)
    logits = np.concatenate(logits) if logits else np.zeros((0, 2))
    labels, probs = predict(logits)
    return labels, probs, logits


def f1(precision: float, recall: float) -> float:
    """Harmonic mean; 0 when both are 0."""
    if not (0.0 <= precision <= 1.0 and 0.0 <= recall <= 1.0):
        raise ContractError(f"precision and recall must lie in [0, 1], got {precision}, {recall}")
    s = precision + recall
    return 0.0 if s == 0 else 2.0 * precision * recall / s


def macro_f1(per_class_f1) -> float:
    vals = list(per_class_f1)
    return float(sum(vals) / len(vals))


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    positive: ClassMetrics
    negative: ClassMetrics
    macro_f1: float
    leakage_override: bool = False

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "MetricsReport":
        n = tp + fp + tn + fn
        if n == 0:
            raise ContractError("no clips to score")
        pos_p, pos_r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        neg_p, neg_r = _ratio(tn, tn + fn), _ratio(tn, tn + fp)
        pos = ClassMetrics(pos_p, pos_r, f1(pos_p, pos_r))
        neg = ClassMetrics(neg_p, neg_r, f1(neg_p, neg_r))
        return cls(tp, fp, tn, fn, (tp + tn) / n, pos, neg, macro_f1([pos.f1, neg.f1]))

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "MetricsReport":
        t = np.array([Label(y).index for y in y_true])
        p = np.array([Label(y).index for y in y_pred])
        if t.shape != p.shape:
            raise ContractError("prediction and truth lengths differ")
        return cls.from_counts(
            int(np.sum((t == 1) & (p == 1))), int(np.sum((t == 0) & (p == 1))),
            int(np.sum((t == 0) & (p == 0))), int(np.sum((t == 1) & (p == 0))),
        )

    def to_json(self) -> dict:
        d = {
            "accuracy": self.accuracy,
            "overall_f1": self.macro_f1,
            "positive_class": asdict(self.positive),
            "negative_class": asdict(self.negative),
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "n_clips": self.n,
        }
        if self.leakage_override:
            d["leakage_override"] = True
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        c = d["confusion"]
        rep = cls.from_counts(c["tp"], c["fp"], c["tn"], c["fn"])
        rep.leakage_override = bool(d.get("leakage_override", False))
        return rep


def evaluate(model: ScreeningModel, clips: list[ClipRecord], norm: NormStats | None) -> MetricsReport:
    if not clips:
        raise ContractError("cannot evaluate an empty clip list")
    labels, _, _ = predict_clips(model, clips, norm)
    return MetricsReport.from_predictions([c.label for c in clips], labels)
