import math

import numpy as np
import pytest

from gaitmap.errors import ConfigError, ContractError, LeakageError, NumericError, SplitError
from gaitmap.model import ModelConfig, ScreeningModel
from gaitmap.pose_io import Label, Manifest, ManifestEntry, load_manifest
from gaitmap.synth_gait import build_synthetic_dataset
from gaitmap.training_eval import (
    ClassWeighting,
    MetricsReport,
    TrainConfig,
    check_subject_disjoint,
    class_weights,
    evaluate,
    f1,
    macro_f1,
    predict_clips,
    prepare_clips,
    split_subject_disjoint,
    train,
    write_loss_csv,
)

TINY = dict(n_layers=1, d_model=8, n_heads=2, n_latents=2, mlp_ratio=2)


@pytest.fixture(scope="module")
def clips8(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds8")
    return prepare_clips(load_manifest(build_synthetic_dataset(root, 8, 1, seed=3)))


def _tiny_model(seed=0, **kw):
    return ScreeningModel(ModelConfig.build("cat-latent", **(TINY | kw)), seed=seed)


# -- metrics ---------------------------------------------------------------------------------
def test_f1_examples():
    assert f1(1.0, 1.0) == 1.0
    assert f1(0.0, 0.0) == 0.0
    assert abs(f1(0.486, 0.409) - 0.444) <= 0.001


def test_macro_f1_examples():
    assert abs(macro_f1([0.444, 0.794]) - 0.619) <= 0.001
    assert abs(macro_f1([0.291, 0.684]) - 0.488) <= 0.001


def test_f1_rejects_out_of_range():
    with pytest.raises(ContractError):
        f1(1.2, 0.5)


def test_all_correct_is_perfect():
    rep = MetricsReport.from_predictions([Label.POSITIVE, Label.NEGATIVE] * 3, [Label.POSITIVE, Label.NEGATIVE] * 3)
    assert rep.accuracy == 1.0 and rep.macro_f1 == 1.0
    assert rep.positive.f1 == 1.0 and rep.negative.f1 == 1.0


@pytest.mark.parametrize("counts", [(5, 3, 10, 2), (0, 0, 7, 3), (4, 0, 0, 0), (1, 9, 0, 0), (13, 6, 21, 17)])
def test_metrics_are_consistent_with_counts(counts):
    tp, fp, tn, fn = counts
    rep = MetricsReport.from_counts(tp, fp, tn, fn)
    n = sum(counts)
    assert rep.n == n
    assert abs(rep.accuracy - (tp + tn) / n) < 1e-12
    pp = tp / (tp + fp) if tp + fp else 0.0
    pr = tp / (tp + fn) if tp + fn else 0.0
    np_ = tn / (tn + fn) if tn + fn else 0.0
    nr = tn / (tn + fp) if tn + fp else 0.0
    hm = lambda p, r: 2 * p * r / (p + r) if p + r else 0.0
    assert abs(rep.positive.f1 - hm(pp, pr)) < 1e-12
    assert abs(rep.negative.f1 - hm(np_, nr)) < 1e-12
    assert abs(rep.macro_f1 - (rep.positive.f1 + rep.negative.f1) / 2) < 1e-12
    for c in (rep.positive, rep.negative):
        assert 0.0 <= c.precision <= 1.0 and 0.0 <= c.recall <= 1.0


def test_metrics_json_round_trip():
    rep = MetricsReport.from_counts(5, 3, 10, 2)
    d = rep.to_json()
    assert set(d) == {"accuracy", "overall_f1", "positive_class", "negative_class", "confusion", "n_clips"}
    assert MetricsReport.from_json(d) == rep


def test_empty_evaluation_is_an_error(clips8):
    with pytest.raises(ContractError):
        MetricsReport.from_counts(0, 0, 0, 0)
    with pytest.raises(ContractError):
        evaluate(_tiny_model(), [], None)


# -- splits --------------------------------------------------------------------------------
def _manifest(n, n_pos=None, clips=2):
    n_pos = n // 2 if n_pos is None else n_pos
    entries = []
    for i in range(n):
        lab = Label.POSITIVE if i < n_pos else Label.NEGATIVE
        entries += [ManifestEntry(f"p/{i}_{c}.jsonl", f"S{i}", lab) for c in range(clips)]
    return Manifest(entries)


def test_ten_subjects_split_three_seven():
    res = split_subject_disjoint(_manifest(10), 0.3, seed=0)
    assert len(res.test.subjects()) == 3 and len(res.train.subjects()) == 7
    assert not set(res.test.subjects()) & set(res.train.subjects())
    assert res.warnings == []


def test_subject_clips_stay_together():
    res = split_subject_disjoint(_manifest(10, clips=3), 0.3, seed=1)
    test_subjects = set(res.test.subjects())
    assert all(e.subject_id not in test_subjects for e in res.train.entries)
    assert len(res.test.entries) == 3 * len(test_subjects)


def test_split_is_deterministic_and_seed_dependent():
    m = _manifest(40)
    a, b = split_subject_disjoint(m, 0.3, 7), split_subject_disjoint(m, 0.3, 7)
    assert a.test.subjects() == b.test.subjects()
    assert any(split_subject_disjoint(m, 0.3, s).test.subjects() != a.test.subjects() for s in range(8, 12))


def test_split_is_stratified():
    res = split_subject_disjoint(_manifest(20, n_pos=6), 0.3, seed=2)
    test_labels = {e.subject_id: e.label for e in res.test.entries}
    assert sum(v is Label.POSITIVE for v in test_labels.values()) == 2


@pytest.mark.parametrize("n", range(2, 25))
def test_splits_are_always_disjoint(n):
    for seed in range(5):
        res = split_subject_disjoint(_manifest(n), 0.3, seed)
        assert not set(res.test.subjects()) & set(res.train.subjects())
        assert set(res.test.subjects()) | set(res.train.subjects()) == {f"S{i}" for i in range(n)}


def test_single_subject_cannot_be_split():
    with pytest.raises(SplitError):
        split_subject_disjoint(_manifest(1), 0.3)


def test_missing_label_is_reported():
    res = split_subject_disjoint(_manifest(4, n_pos=1), 0.5, seed=0)
    assert res.warnings


def test_leakage_check_names_subjects():
    with pytest.raises(LeakageError, match="S2"):
        check_subject_disjoint(["S1", "S2"], ["S2", "S3"])


# -- training --------------------------------------------------------------------------------
def test_class_weights():
    assert class_weights(np.array([0, 0, 0, 1]), ClassWeighting.INVERSE_FREQUENCY).tolist() == [4 / 6, 2.0]
    assert class_weights(np.array([0, 1]), ClassWeighting.NONE).tolist() == [1.0, 1.0]


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_json({"lr": 1.0})


def test_epoch_zero_loss_is_near_ln2(clips8):
    res = train(_tiny_model(1), clips8, TrainConfig(epochs=1, batch_size=4))
    assert res.history[0].epoch == 0
    assert abs(res.history[0].loss - math.log(2)) < 0.1


def test_eight_clips_are_memorised(clips8):
    res = train(_tiny_model(2), clips8, TrainConfig(epochs=200, batch_size=8, learning_rate=1e-3))
    labels, _, _ = predict_clips(res.model, clips8, res.norm)
    assert res.history[-1].train_acc == 1.0
    assert labels == [c.label for c in clips8]


def test_training_is_deterministic(clips8):
    cfg = TrainConfig(epochs=3, batch_size=3, seed=5)
    a = train(_tiny_model(4), clips8, cfg)
    b = train(_tiny_model(4), clips8, cfg)
    assert [r.loss for r in a.history] == [r.loss for r in b.history]


def test_loss_decreases_on_four_clips(clips8):
    four = [c for c in clips8 if c.label is Label.POSITIVE][:2] + [c for c in clips8 if c.label is Label.NEGATIVE][:2]
    hist = [r.loss for r in train(_tiny_model(6), four, TrainConfig(epochs=40, learning_rate=1e-3)).history]
    for prev, cur in zip(hist, hist[1:]):
        assert cur <= prev * 1.05
    assert hist[-1] < hist[0]


def test_empty_training_set(clips8):
    with pytest.raises(ContractError):
        train(_tiny_model(), [], TrainConfig())


def test_non_finite_loss_names_the_step(clips8):
    model = _tiny_model(7)
    model.head.fc.bias.data[...] = [1e308, -1e308]
    with np.errstate(all="ignore"), pytest.raises(NumericError, match="initialisation"):
        train(model, clips8, TrainConfig(epochs=1))


def test_divergence_during_training_names_the_step(clips8):
    model = _tiny_model(7)
    with np.errstate(all="ignore"), pytest.raises(NumericError, match=r"epoch 1 step [1-3]\b"):
        train(model, clips8, TrainConfig(epochs=1, batch_size=2, learning_rate=1e308))


def test_loss_csv(tmp_path, clips8):
    res = train(_tiny_model(8), clips8[:4], TrainConfig(epochs=2))
    write_loss_csv(res.history, tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,train_acc"
    assert [line.split(",")[0] for line in lines[1:]] == ["0", "1", "2"]


def test_clip_ids_and_inputs(clips8):
    assert clips8[0].clip_id.endswith("#0")
    assert clips8[0].kmap.values.shape == (96, 238)
    assert clips8[0].video.shape == (96, 32, 32)
    assert len({c.subject_id for c in clips8}) == 8
