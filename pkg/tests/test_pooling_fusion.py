import numpy as np
import pytest

from gaitmap import tensor as T
from gaitmap.encoders import EncoderConfig, Modality, RopeMode, TokenSequence
from gaitmap.errors import ConfigError, ContractError, DimensionError
from gaitmap.model import ModelConfig, ScreeningModel, load_model, save_model
from gaitmap.pooling_fusion import (
    AttentionPooling,
    Classifier,
    FusionConfig,
    LatentAttentionPooling,
    Variant,
    classify,
    fuse,
    pool_att,
    pool_latent,
    pool_mean,
    predict,
    probabilities,
)
from gaitmap.pose_io import Label
from gaitmap.tensor import Tensor

from conftest import grad_check

CFG = EncoderConfig(d_model=16, n_heads=2)


def _seq(rng, n, modality, start=0, step=8, d=16):
    pos = start + step * np.arange(n)
    return TokenSequence(Tensor(rng.normal(size=(n, d))), pos, (modality,) * n)


# -- fusion ---------------------------------------------------------------------------------
def test_fuse_concatenates_in_modality_order(rng):
    m, v = _seq(rng, 12, Modality.KNOWLEDGE_MAP), _seq(rng, 12, Modality.VIDEO)
    t = TokenSequence(Tensor(rng.normal(size=(4, 16))), np.zeros(4), (Modality.TEXT,) * 4, np.full(4, -1))
    out = fuse([t, v, m], FusionConfig())
    assert out.tokens.shape == (28, 16)
    assert out.modalities == (Modality.KNOWLEDGE_MAP,) * 12 + (Modality.VIDEO,) * 12 + (Modality.TEXT,) * 4
    assert np.array_equal(out.tokens.data[12:24], v.tokens.data)
    assert sorted(out.positions.tolist()) == sorted(m.positions.tolist() + v.positions.tolist() + [0] * 4)


def test_fuse_single_modality_is_identity(rng):
    m = _seq(rng, 12, Modality.KNOWLEDGE_MAP)
    out = fuse([m], FusionConfig(modalities=(Modality.KNOWLEDGE_MAP,)))
    assert np.array_equal(out.tokens.data, m.tokens.data)
    assert np.array_equal(out.positions, m.positions)


def test_fuse_non_aligned_uses_ordinals(rng):
    m, v = _seq(rng, 12, Modality.KNOWLEDGE_MAP), _seq(rng, 12, Modality.VIDEO)
    out = fuse([m, v], FusionConfig(rope_mode=RopeMode.NON_ALIGNED))
    assert out.positions.tolist() == list(range(24))
    assert out.frame_starts.tolist() == m.positions.tolist() * 2


def test_fuse_width_mismatch(rng):
    with pytest.raises(DimensionError):
        fuse([_seq(rng, 3, Modality.KNOWLEDGE_MAP), _seq(rng, 3, Modality.VIDEO, d=8)], FusionConfig())


def test_fuse_broadcasts_shared_text(rng):
    m = TokenSequence(Tensor(rng.normal(size=(3, 12, 16))), 8 * np.arange(12), (Modality.KNOWLEDGE_MAP,) * 12)
    t = TokenSequence(Tensor(rng.normal(size=(2, 16))), np.zeros(2), (Modality.TEXT,) * 2)
    out = fuse([m, t], FusionConfig())
    assert out.tokens.shape == (3, 14, 16)
    assert np.array_equal(out.tokens.data[2, 12:], t.tokens.data)


# -- pooling -----------------------------------------------------------------------------------
def test_pool_mean_examples():
    one = TokenSequence(Tensor([[1.0, 2.0]]), [0], (Modality.KNOWLEDGE_MAP,))
    assert pool_mean(one).data.tolist() == [1.0, 2.0]
    two = TokenSequence(Tensor([[1.0, 2.0], [3.0, 6.0]]), [0, 8], (Modality.KNOWLEDGE_MAP,) * 2)
    assert pool_mean(two).data.tolist() == [2.0, 4.0]


def test_pooling_empty_sequence(rng):
    empty = TokenSequence(Tensor(np.zeros((0, 16))), [], ())
    with pytest.raises(ContractError):
        pool_mean(empty)
    with pytest.raises(ContractError):
        pool_latent(empty, LatentAttentionPooling(CFG, 4, rng))


def test_latent_single_token_attention_is_one(rng):
    _, att = pool_latent(_seq(rng, 1, Modality.KNOWLEDGE_MAP), LatentAttentionPooling(CFG, 4, rng))
    assert att.shape == (2, 4, 1)
    assert np.array_equal(att, np.ones_like(att))


def test_latent_rows_are_stochastic(rng):
    _, att = pool_latent(_seq(rng, 20, Modality.VIDEO), LatentAttentionPooling(CFG, 5, rng))
    assert att.shape == (2, 5, 20)
    assert np.all(att >= 0)
    assert np.max(np.abs(att.sum(axis=-1) - 1.0)) < 1e-12


def test_latent_pooling_is_permutation_invariant(rng):
    pool = LatentAttentionPooling(CFG, 4, rng)
    seq = _seq(rng, 10, Modality.KNOWLEDGE_MAP)
    perm = rng.permutation(10)
    shuffled = TokenSequence(Tensor(seq.tokens.data[perm]), seq.positions[perm], seq.modalities)
    a, att = pool_latent(seq, pool)
    b, att_p = pool_latent(shuffled, pool)
    assert np.max(np.abs(a.data - b.data)) < 1e-10
    assert np.allclose(att_p, att[..., perm], atol=1e-12)


def test_latent_pooling_gradients(rng):
    pool = LatentAttentionPooling(EncoderConfig(d_model=8, n_heads=2, mlp_ratio=2), 3, rng)
    seq = _seq(rng, 5, Modality.KNOWLEDGE_MAP, d=8)
    w = rng.normal(size=8)
    assert grad_check(lambda: T.sum_(pool_latent(seq, pool)[0] * w), pool.parameters()) < 1e-4


def test_attention_pool_with_zero_output_is_mean(rng):
    pool = AttentionPooling(CFG, rng)
    pool.attn.wo.weight.data[...] = 0.0
    pool.attn.wo.bias.data[...] = 0.0
    seq = _seq(rng, 7, Modality.VIDEO)
    assert np.allclose(pool_att(seq, pool).data, pool_mean(seq).data, atol=1e-15)


def test_attention_pool_single_token(rng):
    pool = AttentionPooling(CFG, rng)
    seq = _seq(rng, 1, Modality.VIDEO)
    assert pool_att(seq, pool).shape == (16,)
    assert np.all(pool.attn.last_attention == 1.0)


def test_attention_pool_gradients(rng):
    pool = AttentionPooling(EncoderConfig(d_model=8, n_heads=2), rng)
    seq = _seq(rng, 4, Modality.KNOWLEDGE_MAP, d=8)
    w = rng.normal(size=8)
    assert grad_check(lambda: T.sum_(pool_att(seq, pool) * w), pool.parameters()) < 1e-4


# -- classifier ------------------------------------------------------------------------------
def test_zero_classifier_predicts_negative_at_half(rng):
    head = Classifier(16, rng, std=0.0)
    logits = classify(Tensor(rng.normal(size=16)), head)
    assert probabilities(logits).tolist() == [0.5, 0.5]
    labels, p = predict(logits)
    assert labels == [Label.NEGATIVE] and p.tolist() == [0.5]


def test_exact_tie_goes_to_negative():
    assert predict(np.array([[3.0, 3.0], [0.0, 1e-9]]))[0] == [Label.NEGATIVE, Label.POSITIVE]


def test_probabilities_sum_to_one(rng):
    p = probabilities(rng.normal(size=(50, 2)) * 30)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-15)


def test_classifier_width_mismatch(rng):
    with pytest.raises(DimensionError):
        Classifier(16, rng)(Tensor(np.ones(8)))


# -- full model ------------------------------------------------------------------------------
def _inputs(rng, b=2, s=32):
    return rng.normal(size=(b, 96, 238)), rng.uniform(size=(b, 96, s, s))


def _expected_parameter_count(d=64, p=8, layers=4, k=16, mlp=4, silhouette=32, variant="cat-latent"):
    lin = lambda i, o: i * o + o
    block = 2 * 2 * d + 4 * lin(d, d) + lin(d, mlp * d) + lin(mlp * d, d)
    total = lin(p * 238, d) + lin(p * silhouette**2, d) + 2 * layers * block + lin(384, d) + lin(d, 2)
    if variant == "cat-latent":
        total += k * d + 4 * lin(d, d) + lin(d, mlp * d) + lin(mlp * d, d)
    elif variant == "cat-att":
        total += 2 * d + 4 * lin(d, d)
    return total


@pytest.mark.parametrize("variant", ["cat", "cat-att", "cat-latent"])
def test_default_parameter_counts(variant):
    model = ScreeningModel(ModelConfig.build(variant))
    assert model.cfg.encoder.n_layers == 4
    assert model.num_parameters() == _expected_parameter_count(variant=variant)


def test_single_modality_defaults_to_eight_layers():
    assert ModelConfig.build(modalities=["knowledge_map"]).encoder.n_layers == 8


@pytest.mark.parametrize("variant", list(Variant))
@pytest.mark.parametrize("rope", list(RopeMode))
def test_every_variant_runs_forward_and_backward(rng, variant, rope):
    cfg = ModelConfig.build(variant.value, rope.value, n_layers=1, d_model=8, n_heads=2, n_latents=2, mlp_ratio=2,
                            patch_frames=8)
    model = ScreeningModel(cfg, seed=1)
    maps, vids = _inputs(rng)
    res = model(maps, vids)
    assert res.logits.shape == (2, 2)
    assert res.fused.tokens.shape == (2, 28, 8)
    assert (res.attention is not None) == (variant is Variant.CAT_LATENT)
    T.cross_entropy(res.logits, np.array([0, 1])).backward()
    assert all(p.grad is not None for p in model.parameters())


def test_cat_variant_logits_are_head_of_mean(rng):
    model = ScreeningModel(ModelConfig.build("cat", d_model=16, n_heads=2, n_layers=1), seed=2)
    maps, vids = _inputs(rng)
    res = model(maps, vids)
    emb = res.fused.tokens.data.mean(axis=1)
    w, b = model.head.fc.weight.data, model.head.fc.bias.data
    assert np.allclose(res.logits.data, emb @ w + b, atol=1e-12)


def test_non_aligned_positions_reach_the_encoder(rng):
    model = ScreeningModel(ModelConfig.build("cat-latent", "non-aligned", d_model=16, n_heads=2, n_layers=1), seed=3)
    maps, vids = _inputs(rng, b=1)
    seqs = model.token_sequences(maps, vids)
    assert [s.positions.tolist() for s in seqs] == [list(range(12)), list(range(12, 24)), list(range(24, 28))]


def test_tiny_model_gradients(rng):
    cfg = ModelConfig.build("cat-latent", n_layers=1, d_model=8, n_heads=2, n_latents=2, mlp_ratio=2)
    model = ScreeningModel(cfg, seed=4)
    maps, vids = _inputs(rng)
    y = np.array([1, 0])
    loss = lambda: T.cross_entropy(model(maps, vids).logits, y)
    assert grad_check(loss, model.parameters(), max_coords=6) < 1e-4


def test_missing_inputs_are_config_errors(rng):
    model = ScreeningModel(ModelConfig.build(d_model=8, n_heads=2, n_layers=1))
    maps, _ = _inputs(rng)
    with pytest.raises(ConfigError):
        model(maps, None)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(EncoderConfig(rope_mode="aligned"), FusionConfig(rope_mode="non-aligned"))
    with pytest.raises(ConfigError):
        ModelConfig(prompts=())
    with pytest.raises(ConfigError):
        ModelConfig.from_json({"model_size": 3})
    with pytest.raises(ValueError):
        FusionConfig(variant="mean")


def test_save_load_round_trip(tmp_path, rng):
    cfg = ModelConfig.build("cat-att", "non-aligned", ["knowledge_map", "text"], n_layers=1, d_model=8, n_heads=2)
    model = ScreeningModel(cfg, seed=5)
    save_model(model, tmp_path / "m", extra={"note": 1})
    back, norm, meta = load_model(tmp_path / "m")
    assert norm is None and meta["note"] == 1
    assert back.cfg.to_json() == cfg.to_json()
    maps, _ = _inputs(rng)
    assert np.array_equal(back(maps).logits.data, model(maps).logits.data)
