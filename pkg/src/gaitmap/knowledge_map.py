"""Kinematic knowledge map: a [T, 238] matrix of named gait features.

Columns come in three contiguous blocks:

* motion (140): 14 tracked points x 10 trajectory descriptors
* self-skeleton (32): 16 inter-segment angles + 16 joint-pair distances
* cross-correlation (66): every pair of 12 body signals, windowed and lag-maximised

All geometry is computed in a per-clip body frame: origin at the clip-mean
mid-hip, unit length equal to the clip-mean trunk length (mid-shoulder to
mid-hip). This makes every column invariant to translation and uniform scale
of the input keypoints.
"""

from __future__ import annotations

import enum
import itertools
import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateGeometryError, DegeneratePoseError, DimensionError, ParseError
from .pose_io import KP, Clip

SCHEMA_VERSION = 1
N_FEATURES = 238
XCORR_WINDOW = 31
XCORR_MAX_LAG = 10
ZERO_VARIANCE = 1e-12
MIN_TRUNK = 1e-6
DEGENERATE_STD = 1e-8


class Domain(str, enum.Enum):
    MOTION = "Motion"
    SELF_SKELETON = "SelfSkeleton"
    CROSS_CORRELATION = "CrossCorrelation"


@dataclass(frozen=True)
class FeatureDescriptor:
    name: str
    domain: Domain
    column_index: int
    units: str


# -- roster -------------------------------------------------------------------------
TRACKED_POINTS = (
    "nose",
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
    "mid_hip",
)
MOTION_DESCRIPTORS = (
    ("x", "trunk"),
    ("y", "trunk"),
    ("vx", "trunk/s"),
    ("vy", "trunk/s"),
    ("speed", "trunk/s"),
    ("ax", "trunk/s^2"),
    ("ay", "trunk/s^2"),
    ("acc", "trunk/s^2"),
    ("jerk", "trunk/s^3"),
    ("vert_osc", "trunk"),
)
# descriptors that change sign under a horizontal reflection
_X_ODD = {"x", "vx", "ax"}

ANGLES = (
    "elbow_flexion_L",
    "elbow_flexion_R",
    "knee_flexion_L",
    "knee_flexion_R",
    "hip_trunk_thigh_L",
    "hip_trunk_thigh_R",
    "shoulder_trunk_arm_L",
    "shoulder_trunk_arm_R",
    "shoulder_tilt",
    "pelvis_tilt",
    "trunk_lean",
    "head_lean",
    "shoulder_pelvis_angle",
    "thigh_vertical_L",
    "thigh_vertical_R",
    "inter_ankle",
)
DISTANCES = (
    ("wrist_L", "hip_L"),
    ("wrist_R", "hip_R"),
    ("wrist_L", "wrist_R"),
    ("ankle_L", "ankle_R"),
    ("knee_L", "knee_R"),
    ("elbow_L", "hip_L"),
    ("elbow_R", "hip_R"),
    ("shoulder_L", "hip_R"),
    ("shoulder_R", "hip_L"),
    ("nose", "mid_hip"),
    ("wrist_L", "shoulder_L"),
    ("wrist_R", "shoulder_R"),
    ("ankle_L", "hip_L"),
    ("ankle_R", "hip_R"),
    ("knee_L", "hip_L"),
    ("knee_R", "hip_R"),
)
XCORR_SIGNALS = (
    "wrist_L_y",
    "wrist_R_y",
    "elbow_L_y",
    "elbow_R_y",
    "knee_L_y",
    "knee_R_y",
    "ankle_L_y",
    "ankle_R_y",
    "shoulder_tilt",
    "pelvis_tilt",
    "trunk_lean",
    "mid_hip_y",
)
XCORR_PAIRS = tuple(itertools.combinations(range(len(XCORR_SIGNALS)), 2))


def _build_schema() -> tuple[FeatureDescriptor, ...]:
    out: list[FeatureDescriptor] = []

    def add(name, domain, units):
        out.append(FeatureDescriptor(name, domain, len(out), units))

    for point in TRACKED_POINTS:
        for desc, units in MOTION_DESCRIPTORS:
            add(f"{point}.{desc}", Domain.MOTION, units)
    for angle in ANGLES:
        add(f"angle.{angle}", Domain.SELF_SKELETON, "deg")
    for a, b in DISTANCES:
        add(f"dist.{a}-{b}", Domain.SELF_SKELETON, "trunk")
    for i, j in XCORR_PAIRS:
        add(f"xcorr.{XCORR_SIGNALS[i]}~{XCORR_SIGNALS[j]}", Domain.CROSS_CORRELATION, "1")
    return tuple(out)


FEATURE_SCHEMA: tuple[FeatureDescriptor, ...] = _build_schema()
FEATURE_INDEX = {d.name: d.column_index for d in FEATURE_SCHEMA}
DOMAIN_BLOCKS = {
    Domain.MOTION: (0, 140),
    Domain.SELF_SKELETON: (140, 172),
    Domain.CROSS_CORRELATION: (172, 238),
}
assert len(FEATURE_SCHEMA) == N_FEATURES and len(FEATURE_INDEX) == N_FEATURES


def domain_counts(schema=FEATURE_SCHEMA) -> dict[str, int]:
    counts = {d.value: 0 for d in Domain}
    for f in schema:
        counts[f.domain.value] += 1
    return counts


def schema_json(schema=FEATURE_SCHEMA) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "n_features": len(schema),
        "domain_counts": domain_counts(schema),
        "features": [
            {"column": f.column_index, "name": f.name, "domain": f.domain.value, "units": f.units} for f in schema
        ],
    }


_SIDE = re.compile(r"_([LR])(?=[_.\-~]|$)")


def _swap_sides(name: str) -> str:
    return _SIDE.sub(lambda m: "_R" if m.group(1) == "L" else "_L", name)


def mirror_permutation() -> tuple[np.ndarray, np.ndarray]:
    """Column map for a horizontal reflection with left/right relabelling.

    Returns ``(perm, sign)`` with ``extract(mirror(clip))[:, i] ==
    sign[i] * extract(clip)[:, perm[i]]``.
    """
    perm = np.empty(N_FEATURES, dtype=np.int64)
    sign = np.ones(N_FEATURES)
    for f in FEATURE_SCHEMA:
        swapped = _swap_sides(f.name)
        if swapped not in FEATURE_INDEX:
            # pair features are stored in one canonical endpoint order
            head, _, body = swapped.partition(".")
            sep = "~" if head == "xcorr" else "-"
            a, b = body.split(sep)
            swapped = f"{head}.{b}{sep}{a}"
        perm[f.column_index] = FEATURE_INDEX[swapped]
        if f.domain is Domain.MOTION and f.name.rsplit(".", 1)[1] in _X_ODD:
            sign[f.column_index] = -1.0
    return perm, sign


# -- primitives -------------------------------------------------------------------
def pair_distance(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.hypot(*(a - b)))


def _angles(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unsigned angle in degrees between row vectors; NaN where either is zero-length."""
    cross = u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]
    dot = u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1]
    ang = np.degrees(np.arctan2(np.abs(cross), dot))
    bad = (np.hypot(u[..., 0], u[..., 1]) <= 0) | (np.hypot(v[..., 0], v[..., 1]) <= 0)
    return np.where(bad, np.nan, ang)


def segment_angle(u, v) -> float:
    """Unsigned angle between two 2-D vectors, in [0, 180] degrees."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if np.hypot(*u) <= 0 or np.hypot(*v) <= 0:
        raise DegenerateGeometryError("angle undefined for a zero-length segment")
    return float(_angles(u, v))


def _check_xcorr_args(n: int, window: int, max_lag: int) -> None:
    if window < 1 or window % 2 == 0:
        raise ContractError(f"window must be a positive odd number of frames, got {window}")
    if max_lag < 0 or 2 * max_lag >= window:
        raise ContractError(f"max lag {max_lag} must satisfy 0 <= L < W/2 (W={window})")
    if n < window:
        raise ContractError(f"series of length {n} is shorter than the window {window}")


def _window_start(t, n: int, window: int):
    return np.clip(np.asarray(t) - window // 2, 0, n - window)


def windowed_xcorr(s1, s2, t: int, window: int = XCORR_WINDOW, max_lag: int = XCORR_MAX_LAG) -> float:
    """Max over lags in [-L, L] of the Pearson correlation of ``s1[i]`` with ``s2[i + lag]``.

    Both indices are restricted to the W-frame window centred on ``t``
    (shifted inward at the series edges). Windows or lagged segments with
    variance below 1e-12 contribute 0.
    """
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    if s1.shape != s2.shape or s1.ndim != 1:
        raise DimensionError(f"series must be 1-D and equal length, got {s1.shape} and {s2.shape}")
    n = len(s1)
    _check_xcorr_args(n, window, max_lag)
    a = int(_window_start(t, n, window))
    w1, w2 = s1[a : a + window], s2[a : a + window]
    if w1.var() < ZERO_VARIANCE or w2.var() < ZERO_VARIANCE:
        return 0.0
    best = -np.inf
    for lag in range(-max_lag, max_lag + 1):
        x = w1[max(0, -lag) : window - max(0, lag)]
        y = w2[max(0, lag) : window + min(0, lag)]
        xc, yc = x - x.mean(), y - y.mean()
        vx, vy = (xc * xc).mean(), (yc * yc).mean()
        r = 0.0 if vx < ZERO_VARIANCE or vy < ZERO_VARIANCE else (xc * yc).sum() / np.sqrt((xc * xc).sum() * (yc * yc).sum())
        best = max(best, r)
    return float(np.clip(best, -1.0, 1.0))


def xcorr_block(signals: np.ndarray, pairs=XCORR_PAIRS, window: int = XCORR_WINDOW, max_lag: int = XCORR_MAX_LAG) -> np.ndarray:
    """``windowed_xcorr`` for every frame and every signal pair at once.

    ``signals`` is [S, T]; returns [T, len(pairs)].
    """
    signals = np.asarray(signals, dtype=np.float64)
    n = signals.shape[1]
    _check_xcorr_args(n, window, max_lag)
    p = np.array([a for a, _ in pairs], dtype=np.int64)
    q = np.array([b for _, b in pairs], dtype=np.int64)
    win = sliding_window_view(signals, window, axis=1)  # [S, A, W], one row per distinct window start
    best = np.full((len(pairs), win.shape[1]), -np.inf)
    for lag in range(-max_lag, max_lag + 1):
        m = window - abs(lag)
        x = win[:, :, max(0, -lag) : max(0, -lag) + m]
        y = win[:, :, max(0, lag) : max(0, lag) + m]
        xc = x - x.mean(axis=-1, keepdims=True)
        yc = y - y.mean(axis=-1, keepdims=True)
        ssx = (xc * xc).sum(axis=-1)  # [S, A]
        ssy = (yc * yc).sum(axis=-1)
        dots = np.matmul(xc.transpose(1, 0, 2), yc.transpose(1, 2, 0))  # [A, S, S]
        dot = dots[:, p, q].T  # [P, A]
        low = (ssx[p] / m < ZERO_VARIANCE) | (ssy[q] / m < ZERO_VARIANCE)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(low, 0.0, dot / np.sqrt(ssx[p] * ssy[q]))
        np.maximum(best, r, out=best)
    wvar = win.var(axis=-1)
    flat = (wvar[p] < ZERO_VARIANCE) | (wvar[q] < ZERO_VARIANCE)
    best = np.clip(np.where(flat, 0.0, best), -1.0, 1.0)
    return best[:, _window_start(np.arange(n), n, window)].T


# -- extraction ---------------------------------------------------------------------
@dataclass
class KnowledgeMap:
    values: np.ndarray  # [T, 238]
    fps: float
    schema: tuple[FeatureDescriptor, ...] = FEATURE_SCHEMA

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.schema):
            raise DimensionError(f"knowledge map must be [T, {len(self.schema)}], got {list(self.values.shape)}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, FEATURE_INDEX[name]]

    def block(self, domain: Domain) -> np.ndarray:
        lo, hi = DOMAIN_BLOCKS[domain]
        return self.values[:, lo:hi]


def _fill_nan_forward(a: np.ndarray) -> np.ndarray:
    """Replace NaNs by the previous valid frame (next valid one for a leading gap, 0 if none)."""
    a = a.copy()
    for col in np.flatnonzero(np.isnan(a).any(axis=0)):
        x = a[:, col]
        ok = ~np.isnan(x)
        if not ok.any():
            a[:, col] = 0.0
            continue
        idx = np.where(ok, np.arange(len(x)), -1)
        idx = np.maximum.accumulate(idx)
        first = np.argmax(ok)
        idx[idx < 0] = first
        a[:, col] = x[idx]
    return a


def _centre(y: np.ndarray) -> np.ndarray:
    # offset by the first sample so a constant series centres to exact zeros
    d = y - y[:1]
    return d - d.mean(axis=0, keepdims=True)


def body_frame_points(keypoints: np.ndarray) -> dict[str, np.ndarray]:
    """Tracked points (plus mid_shoulder) as [T, 2] arrays in trunk-normalised body coordinates."""
    xy = np.asarray(keypoints, dtype=np.float64)[..., :2]
    mid_hip = 0.5 * (xy[:, KP["hip_L"]] + xy[:, KP["hip_R"]])
    mid_sh = 0.5 * (xy[:, KP["shoulder_L"]] + xy[:, KP["shoulder_R"]])
    trunk = float(np.mean(np.hypot(*(mid_sh - mid_hip).T)))
    if not trunk >= MIN_TRUNK:
        raise DegeneratePoseError(f"trunk length {trunk:.3g} is below {MIN_TRUNK}")
    origin = mid_hip.mean(axis=0)
    pts = {name: (xy[:, KP[name]] - origin) / trunk for name in TRACKED_POINTS if name != "mid_hip"}
    pts["mid_hip"] = (mid_hip - origin) / trunk
    pts["mid_shoulder"] = (mid_sh - origin) / trunk
    return pts


def _motion_block(pts: dict[str, np.ndarray], fps: float) -> np.ndarray:
    cols = []
    for name in TRACKED_POINTS:
        p = pts[name]
        v = np.gradient(p, axis=0) * fps
        a = np.gradient(v, axis=0) * fps
        j = np.gradient(a, axis=0) * fps
        cols.append(
            np.column_stack(
                [
                    p[:, 0],
                    p[:, 1],
                    v[:, 0],
                    v[:, 1],
                    np.hypot(v[:, 0], v[:, 1]),
                    a[:, 0],
                    a[:, 1],
                    np.hypot(a[:, 0], a[:, 1]),
                    np.hypot(j[:, 0], j[:, 1]),
                    _centre(p[:, 1]),
                ]
            )
        )
    return np.concatenate(cols, axis=1)


def _angle_block(pts: dict[str, np.ndarray]) -> np.ndarray:
    n = len(pts["mid_hip"])
    right = np.tile([1.0, 0.0], (n, 1))
    up = np.tile([0.0, -1.0], (n, 1))
    down = -up
    trunk_down = pts["mid_hip"] - pts["mid_shoulder"]
    g = pts
    ang = [
        _angles(g["elbow_L"] - g["shoulder_L"], g["wrist_L"] - g["elbow_L"]),
        _angles(g["elbow_R"] - g["shoulder_R"], g["wrist_R"] - g["elbow_R"]),
        _angles(g["knee_L"] - g["hip_L"], g["ankle_L"] - g["knee_L"]),
        _angles(g["knee_R"] - g["hip_R"], g["ankle_R"] - g["knee_R"]),
        _angles(trunk_down, g["knee_L"] - g["hip_L"]),
        _angles(trunk_down, g["knee_R"] - g["hip_R"]),
        _angles(trunk_down, g["elbow_L"] - g["shoulder_L"]),
        _angles(trunk_down, g["elbow_R"] - g["shoulder_R"]),
        _angles(g["shoulder_L"] - g["shoulder_R"], right),
        _angles(g["hip_L"] - g["hip_R"], right),
        _angles(g["mid_shoulder"] - g["mid_hip"], up),
        _angles(g["nose"] - g["mid_shoulder"], up),
        _angles(g["shoulder_L"] - g["shoulder_R"], g["hip_L"] - g["hip_R"]),
        _angles(g["knee_L"] - g["hip_L"], down),
        _angles(g["knee_R"] - g["hip_R"], down),
        _angles(g["ankle_L"] - g["mid_hip"], g["ankle_R"] - g["mid_hip"]),
    ]
    return _fill_nan_forward(np.column_stack(ang))


def _distance_block(pts: dict[str, np.ndarray]) -> np.ndarray:
    return np.column_stack([np.hypot(*(pts[a] - pts[b]).T) for a, b in DISTANCES])


def xcorr_signals(pts: dict[str, np.ndarray], angles: np.ndarray) -> np.ndarray:
    """The 12 coordination signals, [12, T], in XCORR_SIGNALS order."""
    rows = [pts[s[:-2]][:, 1] for s in XCORR_SIGNALS[:8]]
    rows += [angles[:, ANGLES.index(name)] for name in ("shoulder_tilt", "pelvis_tilt", "trunk_lean")]
    rows.append(pts["mid_hip"][:, 1])
    return np.stack(rows)


def extract_keypoints(keypoints: np.ndarray, fps: float) -> KnowledgeMap:
    pts = body_frame_points(keypoints)
    motion = _motion_block(pts, fps)
    angles = _angle_block(pts)
    dists = _distance_block(pts)
    xc = xcorr_block(xcorr_signals(pts, angles))
    values = np.concatenate([motion, angles, dists, xc], axis=1)
    return KnowledgeMap(values, fps)


def extract(clip: Clip) -> KnowledgeMap:
    """Knowledge map of one clip (one row per frame)."""
    return extract_keypoints(clip.keypoints, clip.fps)


# -- normalisation ------------------------------------------------------------------
@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "degenerate": [bool(d) for d in self.degenerate],
        }

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(
            np.asarray(d["mean"], dtype=np.float64),
            np.asarray(d["std"], dtype=np.float64),
            np.asarray(d["degenerate"], dtype=bool),
        )


def fit_norm_stats(maps) -> NormStats:
    maps = list(maps)
    if not maps:
        raise ContractError("normalisation statistics need at least one training map")
    stacked = np.concatenate([m.values if isinstance(m, KnowledgeMap) else np.asarray(m) for m in maps], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    degenerate = std < DEGENERATE_STD
    std = np.where(degenerate, 1.0, std)
    return NormStats(mean, std, degenerate)


def apply_norm(kmap: KnowledgeMap, stats: NormStats) -> KnowledgeMap:
    """Per-column z-score; degenerate columns pass through unchanged."""
    z = (kmap.values - stats.mean) / stats.std
    return KnowledgeMap(np.where(stats.degenerate, kmap.values, z), kmap.fps, kmap.schema)


# -- GMKM files ---------------------------------------------------------------------
KM_MAGIC = b"GMKM"
KM_VERSION = 1


def save_knowledge_map(kmap: KnowledgeMap, path, sidecar: bool = True) -> None:
    path = Path(path)
    t, f = kmap.values.shape
    header = KM_MAGIC + struct.pack("<III", KM_VERSION, t, f)
    path.write_bytes(header + np.ascontiguousarray(kmap.values, dtype="<f8").tobytes())
    if sidecar:
        side = path.with_suffix(".schema.json")
        side.write_text(json.dumps(schema_json(kmap.schema), indent=1) + "\n", encoding="utf-8")


def load_knowledge_map(path, fps: float = 30.0) -> KnowledgeMap:
    buf = Path(path).read_bytes()
    if buf[:4] != KM_MAGIC:
        raise ParseError("not a GMKM file (bad magic)", path=path)
    version, t, f = struct.unpack_from("<III", buf, 4)
    if version != KM_VERSION:
        raise ParseError(f"unsupported GMKM version {version}", path=path)
    if len(buf) != 16 + 8 * t * f:
        raise ParseError("GMKM payload size does not match header", path=path)
    values = np.frombuffer(buf, dtype="<f8", offset=16).reshape(t, f).astype(np.float64)
    return KnowledgeMap(values, fps)
