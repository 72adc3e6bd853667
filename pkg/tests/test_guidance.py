"""Adapter arithmetic, the guidance model, its losses and checkpointing."""

import math

import numpy as np
import pytest

from cgsd import guidance as gd
from cgsd import numkit as nk
from cgsd.errors import ConfigError, ContractError, DataError, ParseError
from cgsd.numkit import GradTape, Tensor2, grad_check_param


def small_model(seed=0, frozen=True, k=5):
    return gd.GuidanceModel.build(
        d_in=10, hidden=12, d_model=8, k=k, rank=2, alpha=4.0, seed=seed,
        frozen_base=frozen,
    )


# ---------------------------------------------------------------------------
# adapter


def test_lora_zero_init_is_identity_increment():
    rng = np.random.default_rng(0)
    adapter = gd.LoraAdapter.init(6, 4, rank=2, alpha=8.0, rng=rng)
    assert np.all(adapter.b.data == 0.0)
    w = Tensor2(rng.standard_normal((4, 6)))
    x = Tensor2(rng.standard_normal((6, 1)))
    out = gd.lora_forward(x, w, adapter)
    np.testing.assert_allclose(out.data, (w.data @ x.data), atol=1e-12)


def test_lora_forward_hand_case():
    adapter = gd.LoraAdapter(
        a=Tensor2([[1.0, 0.0]]), b=Tensor2([[2.0], [0.0]]), rank=1, alpha=2.0
    )
    w = Tensor2(np.eye(2))
    x = Tensor2([[1.0], [1.0]])
    out = gd.lora_forward(x, w, adapter)
    np.testing.assert_allclose(out.data, [[5.0], [1.0]], atol=1e-12)


def test_lora_increment_scale():
    rng = np.random.default_rng(1)
    adapter = gd.LoraAdapter.init(16, 16, rank=8, alpha=16.0, rng=rng)
    assert adapter.increment_scale == 2.0


def test_lora_rank_bounds():
    rng = np.random.default_rng(2)
    with pytest.raises(ConfigError):
        gd.LoraAdapter.init(6, 4, rank=0, alpha=1.0, rng=rng)
    with pytest.raises(ConfigError):
        gd.LoraAdapter.init(6, 4, rank=5, alpha=1.0, rng=rng)


# ---------------------------------------------------------------------------
# encoding


def test_encode_feature_unit_norm_and_deterministic():
    model = small_model()
    rng = np.random.default_rng(3)
    x = rng.standard_normal(10)
    f1 = gd.encode_feature(x, model)
    f2 = gd.encode_feature(x, model)
    assert np.linalg.norm(f1) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(f1, f2)


def test_encode_matches_frozen_base_before_training():
    # adapter starts at zero, so encoding equals the plain two-layer path
    model = small_model(seed=4)
    rng = np.random.default_rng(5)
    for _ in range(100):
        x = rng.standard_normal(10)
        h = x @ model.w1.data.T + model.b1.data[0]
        h = h * (1.0 / (1.0 + np.exp(-1.702 * h)))
        z = h @ model.w2.data.T + model.b2.data[0]
        expect = z / (np.linalg.norm(z) + 1e-12)
        got = gd.encode_feature(x, model)
        np.testing.assert_allclose(got, expect, atol=1e-9)


# ---------------------------------------------------------------------------
# semantic vector


def test_semantic_vector_orthonormal_prompts():
    model = small_model()
    model.prompts.data = np.eye(5, 8)
    f = np.zeros(8)
    f[1] = 1.0
    sv = gd.semantic_vector(f, model)
    np.testing.assert_allclose(sv.d, [0.0, 1.0, 0.0, 0.0, 0.0], atol=1e-12)
    assert np.argmax(sv.prior) == 1


def test_semantic_vector_hand_case_2d():
    model = gd.GuidanceModel.build(
        d_in=4, hidden=4, d_model=2, k=2, rank=1, alpha=1.0, seed=0, frozen_base=True
    )
    model.prompts.data = np.array([[1.0, 0.0], [0.0, 1.0]])
    sv = gd.semantic_vector(np.array([0.6, 0.8]), model)
    np.testing.assert_allclose(sv.d, [0.6, 0.8], atol=1e-12)


def test_semantic_vector_uniform_prior_on_zero_similarity():
    model = small_model()
    model.prompts.data = np.eye(5, 8)
    f = np.zeros(8)
    f[6] = 1.0  # orthogonal to every prompt row
    sv = gd.semantic_vector(f, model)
    np.testing.assert_allclose(sv.prior, np.full(5, 0.2), atol=1e-12)


def test_semantic_vector_contracts():
    model = small_model()
    rng = np.random.default_rng(6)
    f = rng.standard_normal(8)
    f /= np.linalg.norm(f)
    sv = gd.semantic_vector(f, model)
    assert np.all(np.abs(sv.d) <= 1.0 + 1e-9)
    assert sv.prior.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.argmax(sv.prior) == np.argmax(sv.d)


# ---------------------------------------------------------------------------
# losses


def test_contrastive_loss_hand_case():
    loss = gd.contrastive_loss(Tensor2([[1.0, 0.0]]), [0], scale=1.0)
    assert loss.item() == pytest.approx(-math.log(math.e / (math.e + 1.0)), abs=1e-12)


def test_contrastive_loss_uniform_similarity():
    loss = gd.contrastive_loss(Tensor2([[0.3] * 5]), [2], scale=2.0)
    assert loss.item() == pytest.approx(math.log(5.0), abs=1e-12)


def test_contrastive_loss_single_class_degenerate():
    loss = gd.contrastive_loss(Tensor2([[0.7]]), [0], scale=1.0)
    assert loss.item() == 0.0


def test_contrastive_loss_rejects_bad_label():
    with pytest.raises(DataError):
        gd.contrastive_loss(Tensor2([[0.0, 0.0]]), [2], scale=1.0)


def test_ranking_loss_fully_ordered_is_zero():
    d = Tensor2([[0.9, 0.6, 0.3, 0.2, 0.1]])
    assert gd.ranking_loss(d, [0], margin=0.05).item() == 0.0


def test_ranking_loss_hand_case():
    d = Tensor2([[0.2, 0.4]])
    assert gd.ranking_loss(d, [0], margin=0.05).item() == pytest.approx(0.25, abs=1e-12)


def test_ranking_loss_zero_margin_unimodal():
    d = Tensor2([[0.4, 0.5, 0.3, 0.2, 0.05]])
    assert gd.ranking_loss(d, [1], margin=0.0).item() == 0.0


def test_ranking_loss_violation_strictly_increases():
    ordered = Tensor2([[0.9, 0.6, 0.3, 0.2, 0.1]])
    swapped = Tensor2([[0.6, 0.9, 0.3, 0.2, 0.1]])  # grades 0 and 1 swapped
    lo = gd.ranking_loss(ordered, [0], margin=0.05).item()
    hi = gd.ranking_loss(swapped, [0], margin=0.05).item()
    assert hi > lo


def test_guidance_loss_lambda_switch():
    model = small_model(seed=7)
    rng = np.random.default_rng(8)
    feats = rng.standard_normal((4, 10))
    labels = [0, 1, 2, 3]
    cfg0 = gd.GuidanceTrainConfig(lambda_rank=0.0)
    total = gd.guidance_loss(feats, labels, model, cfg0).item()

    f = model.encode_batch(feats)
    d = model.similarity_batch(f)
    ce = gd.contrastive_loss(d, labels, model.scale_value()).item()
    assert total == pytest.approx(ce, abs=1e-12)


def test_guidance_loss_rejects_empty_batch():
    model = small_model()
    with pytest.raises(DataError):
        gd.guidance_loss(np.zeros((0, 10)), [], model, gd.GuidanceTrainConfig())


def test_frozen_base_receives_no_gradient():
    model = small_model(seed=9, frozen=True)
    rng = np.random.default_rng(10)
    feats = rng.standard_normal((4, 10))
    tape = GradTape()
    for p in model.trainable_params():
        tape.watch(p)
    loss = gd.guidance_loss(feats, [0, 1, 2, 3], model, gd.GuidanceTrainConfig(), tape)
    nk.backward(loss, tape)
    assert not model.w1.requires_grad
    assert model.w1.grad is None and model.w2.grad is None
    assert model.adapter.a.grad is not None
    assert model.prompts.grad is not None
    assert model.log_scale.grad is not None


def test_guidance_loss_gradient_check_small_model():
    model = small_model(seed=11)
    rng = np.random.default_rng(12)
    feats = rng.standard_normal((4, 10))
    labels = [0, 1, 2, 4]
    cfg = gd.GuidanceTrainConfig()

    def loss_fn(tape):
        return gd.guidance_loss(feats, labels, model, cfg, tape)

    for param in model.trainable_params():
        assert grad_check_param(loss_fn, param, h=1e-6) < 1e-4


# ---------------------------------------------------------------------------
# prediction


def test_zero_shot_tie_breaks_to_smaller_index():
    model = small_model()
    d = np.array([[0.5, 0.5, 0.0, 0.0, 0.0]])
    assert int(np.argmax(d, axis=1)[0]) == 0  # documents the numpy tie rule

    model.prompts.data = np.eye(5, 8)
    f = (np.eye(8)[0] + np.eye(8)[1]) / math.sqrt(2.0)
    x_dummy = np.zeros(8)
    sv = gd.semantic_vector(f, model)
    assert sv.d[0] == pytest.approx(sv.d[1], abs=1e-12)
    assert int(np.argmax(sv.d)) == 0


def test_prediction_invariant_to_log_scale():
    model = small_model(seed=13)
    rng = np.random.default_rng(14)
    feats = rng.standard_normal((10, 10))
    before = gd.predict_batch(feats, model)
    model.log_scale.data = np.array([[5.0]])
    after = gd.predict_batch(feats, model)
    np.testing.assert_array_equal(before, after)


def test_scale_clamped_at_maximum():
    model = small_model()
    model.log_scale.data = np.array([[50.0]])
    assert model.scale_value() == gd.SCALE_MAX


# ---------------------------------------------------------------------------
# checkpointing


def test_checkpoint_round_trip_value_exact(tmp_path):
    model = small_model(seed=15)
    model.prompts.data += 0.123456789012345678
    path = tmp_path / "g.json"
    gd.save_guidance(path, model, frozen=True)
    loaded, frozen = gd.load_guidance(path)
    assert frozen is True
    for a, b in (
        (model.w1, loaded.w1),
        (model.w2, loaded.w2),
        (model.b1, loaded.b1),
        (model.b2, loaded.b2),
        (model.adapter.a, loaded.adapter.a),
        (model.adapter.b, loaded.adapter.b),
        (model.prompts, loaded.prompts),
        (model.log_scale, loaded.log_scale),
    ):
        np.testing.assert_array_equal(a.data, b.data)
    assert loaded.adapter.rank == model.adapter.rank
    assert loaded.adapter.alpha == model.adapter.alpha


def test_checkpoint_rejects_wrong_format(tmp_path):
    import json

    model = small_model()
    path = tmp_path / "g.json"
    gd.save_guidance(path, model, frozen=True)
    doc = json.loads(path.read_text())
    doc["format"] = "something-else"
    path.write_text(json.dumps(doc))
    with pytest.raises(ParseError):
        gd.load_guidance(path)


# ---------------------------------------------------------------------------
# training effect


def test_training_reduces_loss_on_separable_data(separable_stage1):
    log = separable_stage1["log"]
    stage1_lines = [l for l in log if l.startswith("stage1,")]
    first = float(stage1_lines[0].split(",")[3])
    last = float(stage1_lines[-1].split(",")[3])
    assert last < first
