import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitmap.errors import ContractError, DegeneratePoseError
from gaitmap.knowledge_map import extract_keypoints
from gaitmap.pose_io import KP, Label, PoseFrame, load_manifest, load_pose_jsonl
from gaitmap.synth_gait import (
    SyntheticSubject,
    build_synthetic_dataset,
    generate_subject,
    load_video,
    rasterize_frames,
    rasterize_silhouette,
    save_video,
    synthesize_sequence,
    video_path_for,
)

from test_knowledge_map import mirror_keypoints


def _with(subject, **kw):
    return SyntheticSubject(subject.subject_id, subject.cobb_proxy, replace(subject.params, **kw))


def test_healthy_subject_is_symmetric():
    p = generate_subject(0.0, 3).params
    assert p.arm_swing_L == p.arm_swing_R
    assert p.shoulder_tilt_offset == 0.0 and p.pelvis_tilt_offset == 0.0
    assert p.coordination_break == 0.0


def test_label_threshold():
    assert generate_subject(9.9, 1).label is Label.NEGATIVE
    assert generate_subject(10.0, 1).label is Label.POSITIVE


def test_negative_severity_rejected():
    with pytest.raises(ContractError):
        generate_subject(-1.0, 0)


def test_generation_is_deterministic():
    a = synthesize_sequence(generate_subject(14.0, 42), 96)
    b = synthesize_sequence(generate_subject(14.0, 42), 96)
    assert a.keypoints.tobytes() == b.keypoints.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 60.0), st.floats(0.0, 60.0), st.integers(0, 1000))
def test_asymmetry_is_monotone_in_severity(c1, c2, seed):
    lo, hi = sorted((c1, c2))
    a, b = generate_subject(lo, seed).params, generate_subject(hi, seed).params
    assert b.arm_swing_L <= a.arm_swing_L
    assert b.arm_swing_R == a.arm_swing_R
    assert b.shoulder_tilt_offset >= a.shoulder_tilt_offset
    assert b.pelvis_tilt_offset >= a.pelvis_tilt_offset
    assert b.trunk_lean_amp >= a.trunk_lean_amp
    assert b.coordination_break >= a.coordination_break


def test_ankle_height_period_matches_cadence():
    subj = _with(generate_subject(0.0, 8, noise_std=0.0), cadence=1.0)
    y = synthesize_sequence(subj, 192).keypoints[:, KP["ankle_L"], 1]
    y = y - y.mean()
    ac = np.array([np.dot(y[:-lag], y[lag:]) / np.dot(y, y) for lag in range(1, 60)])
    assert int(np.argmax(ac[10:])) + 11 == 30


def test_healthy_gait_mirrors_itself_half_a_cycle_later():
    subj = _with(generate_subject(0.0, 6, noise_std=0.0), cadence=1.0)
    kp = synthesize_sequence(subj, 96 + 15).keypoints
    base = extract_keypoints(kp[:96], 30.0).values
    shifted = extract_keypoints(mirror_keypoints(kp[15:]), 30.0).values
    assert np.max(np.abs(shifted - base)) < 1e-9


def test_confidences_are_one():
    kp = synthesize_sequence(generate_subject(20.0, 1), 96).keypoints
    assert np.all(kp[:, :, 2] == 1.0)


def test_short_sequences_rejected():
    with pytest.raises(ContractError):
        synthesize_sequence(generate_subject(0.0, 1), 95)


# -- silhouettes ------------------------------------------------------------------------
def test_silhouette_is_centred_and_bounded():
    kp = synthesize_sequence(generate_subject(0.0, 2, noise_std=0.0), 96).keypoints
    img = rasterize_silhouette(PoseFrame(0, kp[0]))
    assert img.shape == (32, 32)
    assert img.min() >= 0.0 and img.max() <= 1.0
    ys, xs = np.nonzero(img)
    assert abs(np.average(xs, weights=img[ys, xs]) + 0.5 - 16) < 3
    assert abs(np.average(ys, weights=img[ys, xs]) + 0.5 - 16) < 4


def test_silhouette_ignores_translation_and_scale():
    kp = synthesize_sequence(generate_subject(0.0, 2), 96).keypoints[:4]
    moved = kp.copy()
    moved[..., :2] = moved[..., :2] * 1.7 + [300.0, -120.0]
    assert np.allclose(rasterize_frames(kp), rasterize_frames(moved), atol=1e-4)


def test_collapsed_pose_cannot_be_rasterised():
    with pytest.raises(DegeneratePoseError):
        rasterize_frames(np.zeros((1, 17, 3)))


def test_video_round_trip(tmp_path, rng):
    frames = rng.uniform(size=(3, 8, 8))
    save_video(frames, tmp_path / "v.gmvf")
    assert np.array_equal(load_video(tmp_path / "v.gmvf"), frames)


# -- datasets --------------------------------------------------------------------------
def test_dataset_layout(tmp_path):
    path = build_synthetic_dataset(tmp_path / "d", 10, 3, seed=5)
    m = load_manifest(path)
    assert len(m.entries) == 30
    labels = {e.subject_id: e.label for e in m.entries}
    assert sum(v is Label.POSITIVE for v in labels.values()) == 5
    for e in m.entries:
        assert Label.from_cobb(e.cobb_angle) is e.label
        seq = load_pose_jsonl(m.resolve(e))
        assert seq.keypoints.shape == (96, 17, 3)
        assert load_video(video_path_for(m.resolve(e))).shape == (96, 32, 32)


def test_dataset_is_byte_identical_for_a_seed(tmp_path):
    a = build_synthetic_dataset(tmp_path / "a", 4, 2, seed=9, write_video=False)
    b = build_synthetic_dataset(tmp_path / "b", 4, 2, seed=9, write_video=False)
    assert a.read_bytes() == b.read_bytes()
    for e in json.loads(a.read_text()):
        assert (a.parent / e["pose_path"]).read_bytes() == (b.parent / e["pose_path"]).read_bytes()


@pytest.mark.parametrize("kw", [dict(n_subjects=1), dict(positive_fraction=1.0), dict(clips_per_subject=0)])
def test_dataset_arguments_validated(tmp_path, kw):
    args = dict(n_subjects=4, clips_per_subject=1) | kw
    with pytest.raises(ContractError):
        build_synthetic_dataset(tmp_path, **args)
