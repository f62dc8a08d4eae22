"""Parametric synthetic walkers with scoliosis-like asymmetries.

A subject is drawn as a 2-D coronal-view stick figure whose limbs follow
phase-locked sinusoids at the cadence frequency. Severity (a Cobb-angle
proxy in degrees) maps linearly onto four asymmetries:

====================  ======================================  ==============
parameter             mapping                                 at 0 degrees
====================  ======================================  ==============
arm_swing_L           arm_swing_R * (1 - ARM_SWING_LOSS * c)  equal swings
shoulder_tilt_offset  SHOULDER_TILT_PER_DEG * c               0
pelvis_tilt_offset    PELVIS_TILT_PER_DEG * c                 0
trunk_lean_amp        BASE_LEAN + LEAN_PER_DEG * c            BASE_LEAN
coordination_break    min(1, c / BREAK_FULL_DEG)              0
====================  ======================================  ==============

With zero severity and zero noise the walker is exactly mirror-symmetric
under a half-cycle time shift: ``frame(t + period / 2) == mirror(frame(t))``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DegeneratePoseError, ParseError
from .pose_io import (
    CLIP_FRAMES,
    DEFAULT_FPS,
    KP,
    N_KEYPOINTS,
    Label,
    Manifest,
    ManifestEntry,
    PoseFrame,
    PoseSequence,
    dump_pose_jsonl,
    save_manifest,
)

ARM_SWING_LOSS = 0.022  # per degree
SHOULDER_TILT_PER_DEG = 0.35
PELVIS_TILT_PER_DEG = 0.15
BASE_LEAN = 1.0
LEAN_PER_DEG = 0.08
BREAK_FULL_DEG = 40.0

POSITIVE_RANGE = (12.0, 30.0)
NEGATIVE_RANGE = (0.0, 8.0)
SILHOUETTE_SIZE = 32

# COCO limb graph used for rasterisation
LIMBS = (
    ("shoulder_L", "shoulder_R"),
    ("hip_L", "hip_R"),
    ("shoulder_L", "hip_L"),
    ("shoulder_R", "hip_R"),
    ("shoulder_L", "elbow_L"),
    ("elbow_L", "wrist_L"),
    ("shoulder_R", "elbow_R"),
    ("elbow_R", "wrist_R"),
    ("hip_L", "knee_L"),
    ("knee_L", "ankle_L"),
    ("hip_R", "knee_R"),
    ("knee_R", "ankle_R"),
    ("nose", "eye_L"),
    ("nose", "eye_R"),
    ("eye_L", "ear_L"),
    ("eye_R", "ear_R"),
)


@dataclass(frozen=True)
class GaitParams:
    cadence: float  # steps/s; ankle height repeats once per step period
    step_amplitude: float  # ankle lift, trunk lengths
    arm_swing_L: float  # radians
    arm_swing_R: float
    shoulder_tilt_offset: float  # degrees
    pelvis_tilt_offset: float
    trunk_lean_amp: float
    coordination_break: float  # [0, 1]
    noise_std: float  # pixels
    seed: int
    trunk_px: float = 200.0
    origin_x: float = 960.0
    origin_y: float = 560.0
    phase0: float = 0.0

    def __post_init__(self):
        if self.cadence <= 0:
            raise ContractError("cadence must be > 0")
        if not 0.0 <= self.coordination_break <= 1.0:
            raise ContractError("coordination_break must lie in [0, 1]")
        if self.noise_std < 0:
            raise ContractError("noise_std must be >= 0")


@dataclass(frozen=True)
class SyntheticSubject:
    subject_id: str
    cobb_proxy: float
    params: GaitParams

    @property
    def label(self) -> Label:
        return Label.from_cobb(self.cobb_proxy)


def _subject_rng(seed: int, stream: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}:{stream}".encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def generate_subject(cobb_proxy: float, seed: int, subject_id: str | None = None, noise_std: float = 1.5) -> SyntheticSubject:
    """Severity-driven gait parameters; anthropometrics and cadence come from ``seed``."""
    if cobb_proxy < 0:
        raise ContractError(f"cobb_proxy must be >= 0, got {cobb_proxy}")
    c = float(cobb_proxy)
    rng = _subject_rng(seed, "anthropometrics")
    swing = rng.uniform(0.30, 0.40)
    params = GaitParams(
        cadence=rng.uniform(0.9, 1.1),
        step_amplitude=rng.uniform(0.10, 0.14),
        arm_swing_L=swing * max(0.0, 1.0 - ARM_SWING_LOSS * c),
        arm_swing_R=swing,
        shoulder_tilt_offset=SHOULDER_TILT_PER_DEG * c,
        pelvis_tilt_offset=PELVIS_TILT_PER_DEG * c,
        trunk_lean_amp=BASE_LEAN + LEAN_PER_DEG * c,
        coordination_break=min(1.0, c / BREAK_FULL_DEG),
        noise_std=noise_std,
        seed=seed,
        trunk_px=rng.uniform(170.0, 240.0),
        origin_x=rng.uniform(700.0, 1220.0),
        origin_y=rng.uniform(480.0, 620.0),
        phase0=rng.uniform(0.0, 2.0 * np.pi),
    )
    return SyntheticSubject(subject_id or f"subj{seed}", c, params)


def _rot(theta_deg, half_width):
    th = np.radians(theta_deg)
    return np.stack([half_width * np.cos(th), half_width * np.sin(th)], axis=-1)


def _jitter(t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Smooth zero-mean phase wander, roughly unit amplitude."""
    freqs = rng.uniform(0.3, 1.5, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    return sum(np.sin(2.0 * np.pi * f * t + p) for f, p in zip(freqs, phases)) / np.sqrt(1.5)


def synthesize_sequence(subject: SyntheticSubject, n_frames: int, fps: float = DEFAULT_FPS) -> PoseSequence:
    """Pose sequence in pixels (y down), the subject's left side on image right."""
    if n_frames < CLIP_FRAMES:
        raise ContractError(f"n_frames must be >= {CLIP_FRAMES}")
    g = subject.params
    T = g.trunk_px
    t = np.arange(n_frames) / fps
    phi = 2.0 * np.pi * g.cadence * t + g.phase0
    brk = g.coordination_break * _jitter(t, _subject_rng(g.seed, "coordination"))
    phi_L = phi + brk  # only the left limbs wander

    pts: dict[str, np.ndarray] = {}
    mid_hip = np.stack([g.origin_x + 0.03 * T * np.sin(phi), g.origin_y - 0.02 * T * np.cos(2.0 * phi)], axis=-1)
    pelvis = 3.0 * np.sin(phi) + g.pelvis_tilt_offset
    hw = _rot(pelvis, 0.22 * T)
    pts["hip_L"], pts["hip_R"] = mid_hip + hw, mid_hip - hw

    lean = np.radians(g.trunk_lean_amp * np.sin(phi))
    mid_sh = mid_hip + T * np.stack([np.sin(lean), -np.cos(lean)], axis=-1)
    shoulder = 2.0 * np.sin(phi) + g.shoulder_tilt_offset
    sw = _rot(shoulder, 0.42 * T)
    pts["shoulder_L"], pts["shoulder_R"] = mid_sh + sw, mid_sh - sw

    head = 0.5 * lean
    neck = np.stack([np.sin(head), -np.cos(head)], axis=-1)
    side = np.stack([np.cos(head), np.sin(head)], axis=-1)
    nose = mid_sh + 0.42 * T * neck
    pts["nose"] = nose
    pts["eye_L"], pts["eye_R"] = nose + 0.06 * T * (neck + side), nose + 0.06 * T * (neck - side)
    pts["ear_L"], pts["ear_R"] = nose + 0.02 * T * neck + 0.13 * T * side, nose + 0.02 * T * neck - 0.13 * T * side

    # depth mixes into image height through a slightly raised camera
    depth_mix = 0.35
    for s, sgn, swing, ph_arm, ph_leg in (
        ("L", 1.0, g.arm_swing_L, phi_L + np.pi, phi_L),
        ("R", -1.0, g.arm_swing_R, phi, phi + np.pi),
    ):
        alpha = swing * np.sin(ph_arm)
        upper = np.stack([np.full_like(alpha, sgn * 0.12), np.cos(alpha) + depth_mix * np.sin(alpha)], axis=-1)
        elbow = pts[f"shoulder_{s}"] + 0.48 * T * upper
        fore = np.stack([np.full_like(alpha, sgn * 0.08), np.cos(1.3 * alpha) + depth_mix * np.sin(1.3 * alpha)], axis=-1)
        pts[f"elbow_{s}"] = elbow
        pts[f"wrist_{s}"] = elbow + 0.42 * T * fore

        lift = g.step_amplitude * T * 0.5 * (1.0 + np.sin(ph_leg))
        knee = pts[f"hip_{s}"] + np.stack([np.full_like(lift, sgn * 0.04 * T), 0.75 * T - 0.5 * lift], axis=-1)
        pts[f"knee_{s}"] = knee
        pts[f"ankle_{s}"] = knee + np.stack([np.full_like(lift, sgn * 0.02 * T), 0.72 * T - lift], axis=-1)

    kp = np.zeros((n_frames, N_KEYPOINTS, 3))
    for name, idx in KP.items():
        kp[:, idx, :2] = pts[name]
    if g.noise_std > 0:
        kp[:, :, :2] += _subject_rng(g.seed, "pixel-noise").normal(0.0, g.noise_std, size=(n_frames, N_KEYPOINTS, 2))
    kp[:, :, 2] = 1.0
    return PoseSequence(subject.subject_id, np.arange(n_frames), kp, fps)


# -- silhouettes ---------------------------------------------------------------------
def _raster_transform(keypoints: np.ndarray, size: int) -> np.ndarray:
    """Map ``[F, 17, >=2]`` keypoints to canvas pixels.

    Each frame is centred on its keypoint centroid and scaled so the trunk
    spans 0.28 * size pixels.
    """
    xy = np.asarray(keypoints, dtype=np.float64)[..., :2]
    mid_hip = 0.5 * (xy[:, KP["hip_L"]] + xy[:, KP["hip_R"]])
    mid_sh = 0.5 * (xy[:, KP["shoulder_L"]] + xy[:, KP["shoulder_R"]])
    trunk = np.hypot(*(mid_sh - mid_hip).T)
    if np.any(trunk < 1e-6):
        raise DegeneratePoseError("cannot rasterise a pose with zero trunk length")
    scale = (0.28 * size / trunk)[:, None, None]
    centroid = xy.mean(axis=1, keepdims=True)
    return (xy - centroid) * scale + size / 2.0


def rasterize_silhouette(frame: PoseFrame, size: int = SILHOUETTE_SIZE) -> np.ndarray:
    """Anti-aliased capsule drawing of the skeleton, intensities in [0, 1]."""
    return rasterize_frames(frame.keypoints[None], size)[0]


def rasterize_frames(keypoints: np.ndarray, size: int = SILHOUETTE_SIZE) -> np.ndarray:
    """Vectorised ``rasterize_silhouette`` over ``[F, 17, 3]`` keypoints."""
    xy = _raster_transform(keypoints, size).astype(np.float32)  # [F, 17, 2]
    centres = np.arange(size, dtype=np.float32) + 0.5
    gx, gy = np.meshgrid(centres, centres)
    gx, gy = gx.ravel()[None, :, None], gy.ravel()[None, :, None]  # [1, P, 1]
    a = xy[:, [KP[n] for n, _ in LIMBS]]  # [F, E, 2]
    ab = xy[:, [KP[n] for _, n in LIMBS]] - a
    abx, aby = ab[:, None, :, 0], ab[:, None, :, 1]
    inv = 1.0 / np.maximum(abx * abx + aby * aby, 1e-12)
    rx = gx - a[:, None, :, 0]  # [F, P, E]
    ry = gy - a[:, None, :, 1]
    u = np.clip((rx * abx + ry * aby) * inv, 0.0, 1.0)
    rx -= u * abx
    ry -= u * aby
    d_limb = np.sqrt((rx * rx + ry * ry).min(axis=-1))  # [F, P]
    nose = xy[:, None, KP["nose"]]  # [F, 1, 2]
    d_head = np.hypot(gx[..., 0] - nose[..., 0], gy[..., 0] - nose[..., 1])
    radius = 0.045 * size
    inten = np.maximum(radius + 0.5 - d_limb, 2.0 * radius + 0.5 - d_head)
    return np.clip(inten, 0.0, 1.0).astype(np.float64).reshape(len(xy), size, size)


VF_MAGIC = b"GMVF"


def save_video(frames: np.ndarray, path) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f8")
    n, h, w = frames.shape
    Path(path).write_bytes(VF_MAGIC + struct.pack("<III", n, h, w) + frames.tobytes())


def load_video(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != VF_MAGIC:
        raise ParseError("not a GMVF file (bad magic)", path=path)
    n, h, w = struct.unpack_from("<III", buf, 4)
    if len(buf) != 16 + 8 * n * h * w:
        raise ParseError("GMVF payload size does not match header", path=path)
    return np.frombuffer(buf, dtype="<f8", offset=16).reshape(n, h, w).copy()


def video_path_for(pose_path) -> Path:
    """Sibling silhouette file written next to a synthetic pose file."""
    return Path(pose_path).with_suffix(".gmvf")


# -- datasets ------------------------------------------------------------------------
def build_synthetic_dataset(
    out_dir,
    n_subjects: int,
    clips_per_subject: int,
    positive_fraction: float = 0.5,
    seed: int = 0,
    noise_std: float = 1.5,
    fps: float = DEFAULT_FPS,
    write_video: bool = True,
) -> Path:
    """Write one pose file (and silhouette file) per clip plus ``manifest.json``.

    Returns the manifest path.
    """
    if n_subjects < 2:
        raise ContractError("need at least two subjects")
    if not 0.0 < positive_fraction < 1.0:
        raise ContractError("positive_fraction must lie in (0, 1)")
    if clips_per_subject < 1:
        raise ContractError("clips_per_subject must be >= 1")
    out_dir = Path(out_dir)
    pose_dir = out_dir / "poses"
    pose_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_pos = int(round(positive_fraction * n_subjects))
    labels = [Label.POSITIVE] * n_pos + [Label.NEGATIVE] * (n_subjects - n_pos)
    labels = [labels[i] for i in rng.permutation(n_subjects)]
    entries = []
    for k, label in enumerate(labels):
        lo, hi = POSITIVE_RANGE if label is Label.POSITIVE else NEGATIVE_RANGE
        cobb = round(float(rng.uniform(lo, hi)), 3)
        subject_seed = int(rng.integers(0, 2**31 - 1))
        sid = f"S{k:04d}"
        subject = generate_subject(cobb, subject_seed, sid, noise_std=noise_std)
        seq = synthesize_sequence(subject, CLIP_FRAMES * clips_per_subject, fps)
        for c in range(clips_per_subject):
            sl = slice(c * CLIP_FRAMES, (c + 1) * CLIP_FRAMES)
            clip_seq = PoseSequence(sid, seq.frame_indices[sl], seq.keypoints[sl], fps)
            pose_path = pose_dir / f"{sid}_c{c}.jsonl"
            dump_pose_jsonl(clip_seq, pose_path)
            if write_video:
                save_video(rasterize_frames(clip_seq.keypoints), video_path_for(pose_path))
            entries.append(ManifestEntry(f"poses/{pose_path.name}", sid, subject.label, cobb))
    manifest_path = out_dir / "manifest.json"
    save_manifest(Manifest(entries, out_dir), manifest_path)
    return manifest_path
