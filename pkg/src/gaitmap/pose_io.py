"""Pose-keypoint ingestion: JSON-lines parsing, gap filling and clip segmentation.

Keypoints follow the COCO-17 order. Arrays are ``[frames, 17, 3]`` with the
last axis ``(x, y, confidence)`` in pixels, y pointing down.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, ParseError, ValidationError

COCO_KEYPOINTS = (
    "nose",
    "eye_L",
    "eye_R",
    "ear_L",
    "ear_R",
    "shoulder_L",
    "shoulder_R",
    "elbow_L",
    "elbow_R",
    "wrist_L",
    "wrist_R",
    "hip_L",
    "hip_R",
    "knee_L",
    "knee_R",
    "ankle_L",
    "ankle_R",
)
KP = {name: i for i, name in enumerate(COCO_KEYPOINTS)}
N_KEYPOINTS = 17
CLIP_FRAMES = 96
DEFAULT_FPS = 30.0
DEFAULT_CONF_THRESHOLD = 0.3
COBB_THRESHOLD_DEG = 10.0


class Label(str, enum.Enum):
    NEGATIVE = "negative"
    POSITIVE = "positive"

    @property
    def index(self) -> int:
        return 1 if self is Label.POSITIVE else 0

    @classmethod
    def from_index(cls, i: int) -> "Label":
        return cls.POSITIVE if i == 1 else cls.NEGATIVE

    @classmethod
    def from_cobb(cls, cobb: float) -> "Label":
        return cls.POSITIVE if cobb >= COBB_THRESHOLD_DEG else cls.NEGATIVE


@dataclass(frozen=True)
class PoseFrame:
    frame_index: int
    keypoints: np.ndarray  # [17, 3]

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64)
        if kp.shape != (N_KEYPOINTS, 3):
            raise ValidationError(f"PoseFrame needs 17 keypoints of (x, y, conf), got shape {kp.shape}")
        object.__setattr__(self, "keypoints", kp)


@dataclass
class PoseSequence:
    subject_id: str
    frame_indices: np.ndarray  # [n] int
    keypoints: np.ndarray  # [n, 17, 3]
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.int64)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        n = len(self.frame_indices)
        if self.keypoints.shape != (n, N_KEYPOINTS, 3):
            raise ValidationError(f"keypoints must be [{n}, 17, 3], got {list(self.keypoints.shape)}")
        if self.fps <= 0:
            raise ValidationError("fps must be > 0")
        if n and (self.frame_indices[0] < 0 or np.any(np.diff(self.frame_indices) <= 0)):
            raise ValidationError("frame indices must be non-negative and strictly increasing")

    def __len__(self):
        return len(self.frame_indices)

    def frame(self, i: int) -> PoseFrame:
        return PoseFrame(int(self.frame_indices[i]), self.keypoints[i])


@dataclass
class Clip:
    subject_id: str
    frame_indices: np.ndarray  # [96]
    keypoints: np.ndarray  # [96, 17, 3]
    label: Label
    cobb_angle: float | None = None
    fps: float = DEFAULT_FPS
    clip_id: str = ""

    def __post_init__(self):
        self.label = Label(self.label)
        if len(self.frame_indices) != CLIP_FRAMES or self.keypoints.shape != (CLIP_FRAMES, N_KEYPOINTS, 3):
            raise ValidationError(f"a clip holds exactly {CLIP_FRAMES} frames")
        if self.cobb_angle is not None and Label.from_cobb(self.cobb_angle) is not self.label:
            raise ValidationError(
                f"label {self.label.value} contradicts Cobb angle {self.cobb_angle} (threshold {COBB_THRESHOLD_DEG})"
            )


@dataclass(frozen=True)
class ManifestEntry:
    pose_path: str
    subject_id: str
    label: Label
    cobb_angle: float | None = None

    def to_json(self) -> dict:
        d = {"pose_path": self.pose_path, "subject_id": self.subject_id, "label": self.label.value}
        if self.cobb_angle is not None:
            d["cobb_angle"] = self.cobb_angle
        return d


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.pose_path)
        return p if p.is_absolute() else self.root / p

    def subjects(self) -> set[str]:
        return {e.subject_id for e in self.entries}

    def __len__(self):
        return len(self.entries)


# -- pose files -------------------------------------------------------------------
def load_pose_jsonl(path, subject_id: str | None = None, fps: float = DEFAULT_FPS) -> PoseSequence:
    """Parse ``{"frame": int, "keypoints": [[x, y, c] x 17]}`` lines."""
    path = Path(path)
    indices: list[int] = []
    frames: list[np.ndarray] = []
    seen: dict[int, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno, path=path) from None
            if not isinstance(rec, dict) or "frame" not in rec or "keypoints" not in rec:
                raise ParseError('expected an object with "frame" and "keypoints"', line=lineno, path=path)
            idx = rec["frame"]
            if not isinstance(idx, int) or isinstance(idx, bool) or idx < 0:
                raise ParseError(f"frame must be a non-negative integer, got {idx!r}", line=lineno, path=path)
            try:
                kp = np.asarray(rec["keypoints"], dtype=np.float64)
            except (TypeError, ValueError):
                raise ParseError("keypoints must be numeric triples", line=lineno, path=path) from None
            if kp.shape != (N_KEYPOINTS, 3):
                raise ParseError(
                    f"expected 17 keypoints of [x, y, conf], got shape {list(kp.shape)}", line=lineno, path=path
                )
            if not np.all(np.isfinite(kp)):
                raise ParseError("non-finite keypoint value", line=lineno, path=path)
            if np.any((kp[:, 2] < 0) | (kp[:, 2] > 1)):
                raise ParseError("confidence outside [0, 1]", line=lineno, path=path)
            if idx in seen:
                raise ValidationError(f"{path}: duplicate frame index {idx} on lines {seen[idx]} and {lineno}")
            seen[idx] = lineno
            indices.append(idx)
            frames.append(kp)
    order = np.argsort(indices, kind="stable")
    kps = np.stack(frames)[order] if frames else np.zeros((0, N_KEYPOINTS, 3))
    return PoseSequence(
        subject_id=subject_id if subject_id is not None else path.stem,
        frame_indices=np.asarray(indices, dtype=np.int64)[order],
        keypoints=kps,
        fps=fps,
    )


def dump_pose_jsonl(seq: PoseSequence, path) -> None:
    lines = []
    for idx, kp in zip(seq.frame_indices, seq.keypoints):
        rec = {"frame": int(idx), "keypoints": [[float(v) for v in row] for row in kp]}
        lines.append(json.dumps(rec, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def interpolate_missing(seq: PoseSequence, conf_threshold: float = DEFAULT_CONF_THRESHOLD) -> PoseSequence:
    """Fill low-confidence keypoints by per-joint linear interpolation.

    Interpolation runs over frame indices; gaps at either end take the
    nearest valid value. Filled keypoints get confidence ``conf_threshold``.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ContractError(f"conf_threshold must lie in [0, 1], got {conf_threshold}")
    kp = seq.keypoints.copy()
    t = seq.frame_indices.astype(np.float64)
    for j in range(N_KEYPOINTS):
        valid = kp[:, j, 2] >= conf_threshold
        if valid.all():
            continue
        if not valid.any():
            raise DataError(f"joint {COCO_KEYPOINTS[j]} has no observation with confidence >= {conf_threshold}")
        missing = ~valid
        for axis in (0, 1):
            # np.interp holds end values constant outside the valid range
            kp[missing, j, axis] = np.interp(t[missing], t[valid], kp[valid, j, axis])
        kp[missing, j, 2] = conf_threshold
    return PoseSequence(seq.subject_id, seq.frame_indices.copy(), kp, seq.fps)


def segment_clips(
    seq: PoseSequence, label: Label | str = Label.NEGATIVE, cobb_angle: float | None = None, clip_frames: int = CLIP_FRAMES
) -> list[Clip]:
    """Cut ``seq`` into consecutive non-overlapping clips from frame 0; the tail is dropped."""
    if len(seq) == 0:
        raise ContractError("cannot segment an empty sequence")
    clips = []
    for k in range(len(seq) // clip_frames):
        sl = slice(k * clip_frames, (k + 1) * clip_frames)
        clips.append(
            Clip(
                subject_id=seq.subject_id,
                frame_indices=seq.frame_indices[sl].copy(),
                keypoints=seq.keypoints[sl].copy(),
                label=Label(label),
                cobb_angle=cobb_angle,
                fps=seq.fps,
                clip_id=f"{seq.subject_id}#{k}",
            )
        )
    return clips


# -- manifests ----------------------------------------------------------------------
def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid manifest JSON ({exc.msg})", line=exc.lineno, path=path) from None
    if not isinstance(raw, list):
        raise ParseError("manifest must be a JSON array", path=path)
    entries = []
    for i, rec in enumerate(raw):
        if not isinstance(rec, dict):
            raise ParseError(f"entry {i} is not an object", path=path)
        unknown = set(rec) - {"pose_path", "subject_id", "label", "cobb_angle"}
        if unknown:
            raise ParseError(f"entry {i} has unknown keys {sorted(unknown)}", path=path)
        try:
            label = Label(rec["label"])
            entry = ManifestEntry(
                pose_path=str(rec["pose_path"]),
                subject_id=str(rec["subject_id"]),
                label=label,
                cobb_angle=None if rec.get("cobb_angle") is None else float(rec["cobb_angle"]),
            )
        except KeyError as exc:
            raise ParseError(f"entry {i} lacks {exc.args[0]!r}", path=path) from None
        except ValueError as exc:
            raise ParseError(f"entry {i}: {exc}", path=path) from None
        if entry.cobb_angle is not None and Label.from_cobb(entry.cobb_angle) is not label:
            raise ValidationError(f"{path}: entry {i} label contradicts its Cobb angle")
        entries.append(entry)
    return Manifest(entries, path.parent)


def save_manifest(manifest: Manifest, path) -> None:
    """Write ``manifest`` with pose paths relative to the new file's directory."""
    path = Path(path)
    out = []
    for e in manifest.entries:
        target = manifest.resolve(e)
        rel = os.path.relpath(target.resolve(), path.parent.resolve())
        d = e.to_json()
        d["pose_path"] = Path(rel).as_posix()
        out.append(d)
    path.write_text(json.dumps(out, indent=1) + "\n", encoding="utf-8")
