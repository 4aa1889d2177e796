import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from textspot import autodiff as ad
from textspot.autodiff import Tensor
from textspot.network import (
    GraphInputs,
    ModelConfig,
    SpottingNetwork,
    am_softmax_loss,
    classification_cosine,
    instance_loss,
    total_loss,
    with_ablation,
)
from textspot.pipeline import pipeline_gradcheck, prepare_tile
from textspot.synth import compact_tile

SMALL = dict(
    dim=12, heads=2, edge_hidden=8, ffn_hidden=16, offset_hidden=8, feature_channels=4, cnn_widths=(4, 4), raster_size=32
)


def small_model(k=4, seed=0, **overrides):
    cfg = ModelConfig(num_classes=8, k=k, **{**SMALL, **overrides})
    return SpottingNetwork(cfg, seed=seed, dtype=np.float64)


def prepared(n=10, k=4, seed=3):
    return prepare_tile(compact_tile(n, seed), None, k, 32)


def hand_inputs(n, k, edges=None, mask=None):
    nbrs = np.array([[(i + s + 1) % n for s in range(k)] for i in range(n)])
    return GraphInputs(
        image=np.zeros((32, 32)),
        centers=np.linspace(0.1, 0.9, 2 * n).reshape(n, 2),
        neighbors=nbrs,
        mask=np.ones((n, k), bool) if mask is None else mask,
        edges=np.zeros((n, k, 8)) if edges is None else edges,
    )


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dim=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(stages=0)
    with pytest.raises(ValueError):
        ModelConfig(lambda_ins=-1)


def test_config_text_round_trip():
    cfg = ModelConfig(dim=48, cnn_widths=(4, 8), literal_eq4=True)
    assert ModelConfig.loads(cfg.dumps()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.loads("bogus = 1\n")


# ------------------------------------------------------------- attention


def test_zero_query_projection_gives_zero_scores():
    m = small_model()
    m.params["stage0.q.w"].data[...] = 0.0
    inp = hand_inputs(5, 3)
    a = m.attention_scores(Tensor(np.random.default_rng(0).normal(size=(5, 12))), inp, 0)
    assert not a.data.any()


def test_two_dim_head_hand_value():
    m = small_model(dim=4, heads=2)
    m.params["stage0.q.w"].data = np.eye(4)
    m.params["stage0.k.w"].data = np.eye(4)
    f = np.array([[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]])
    inp = hand_inputs(2, 1)
    a = m.attention_scores(Tensor(f), inp, 0).data
    assert a[0, 0, 0] == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert a[0, 0, 0] == pytest.approx(0.70711, abs=5e-6)


def test_score_and_bias_shapes():
    m = small_model(k=3)
    inp = hand_inputs(5, 3)
    f = Tensor(np.ones((5, 12)))
    assert m.attention_scores(f, inp, 0).shape == (5, 3, 2)
    assert m.edge_bias(inp, 0).shape == (5, 3, 2)


def test_padded_slots_get_minus_infinity():
    mask = np.array([[True, False]] * 3)
    a = small_model(k=2).attention_scores(Tensor(np.ones((3, 12))), hand_inputs(3, 2, mask=mask), 0).data
    assert np.isneginf(a[:, 1]).all() and np.isfinite(a[:, 0]).all()


def test_zero_edge_mlp_with_bias_is_constant():
    m = small_model()
    for name in ("edge1.w", "edge1.b", "edge2.w"):
        m.params[f"stage1.{name}"].data[...] = 0.0
    m.params["stage1.edge2.b"].data = np.array([0.25, -1.5])
    edges = np.random.default_rng(0).normal(size=(6, 4, 8))
    t = m.edge_bias(hand_inputs(6, 4, edges=edges), 1).data
    assert (t[..., 0] == 0.25).all() and (t[..., 1] == -1.5).all()


def test_stages_have_independent_edge_parameters():
    m = small_model()
    edges = np.random.default_rng(0).normal(size=(6, 4, 8))
    inp = hand_inputs(6, 4, edges=edges)
    m.params["stage1.edge2.b"].data = np.array([0.3, 0.1])
    assert not np.allclose(m.edge_bias(inp, 0).data, m.edge_bias(inp, 1).data)


def test_constant_logits_give_uniform_weights():
    m = small_model(k=4)
    mask = np.array([[True, True, True, False]] * 5)
    inp = hand_inputs(5, 4, mask=mask)
    w = m.neighbor_weights(Tensor(np.full((5, 4, 2), 0.7)), Tensor(np.full((5, 4, 2), -2.0)), inp).data
    assert w[:, :3] == pytest.approx(np.full((5, 3, 2), 1 / 3), abs=1e-15)
    assert (w[:, 3] == 0).all()


def test_single_neighbor_gets_weight_one():
    mask = np.array([[False, True, False]] * 4)
    m = small_model(k=3)
    a = Tensor(np.random.default_rng(1).normal(size=(4, 3, 2)))
    w = m.neighbor_weights(a, None, hand_inputs(4, 3, mask=mask)).data
    assert (w[:, 1] == 1.0).all()


def test_large_bias_dominates():
    k = 5
    t = np.zeros((3, k, 2))
    t[:, 2] = 10.0
    w = small_model(k=k).neighbor_weights(Tensor(np.zeros((3, k, 2))), Tensor(t), hand_inputs(3, k)).data
    floor = math.exp(10) / (math.exp(10) + k - 1)
    assert (w[:, 2] >= floor - 1e-15).all()
    assert w[0, 2, 0] == pytest.approx(floor, abs=1e-15)


def test_weight_rows_sum_to_one():
    m = small_model(k=6)
    p = prepared(12, 6)
    out = m.forward(p.inputs)
    for st_ in out.stages:
        sums = st_.weights.data.sum(axis=1)
        assert np.abs(sums - 1.0).max() <= 1e-9


def _permute(inputs: GraphInputs, perm: np.ndarray) -> GraphInputs:
    inv = np.argsort(perm)
    return GraphInputs(
        image=inputs.image,
        centers=inputs.centers[perm],
        neighbors=inv[inputs.neighbors[perm]],
        mask=inputs.mask[perm],
        edges=inputs.edges[perm],
    )


@pytest.mark.parametrize("literal", [False, True])
def test_permutation_equivariance(literal):
    m = small_model(k=5, literal_eq4=literal)
    p = prepared(12, 5)
    perm = np.random.default_rng(4).permutation(12)
    base = m.forward(p.inputs)
    moved = m.forward(_permute(p.inputs, perm))
    for s0, s1 in zip(base.stages, moved.stages):
        assert np.abs(s0.features.data[perm] - s1.features.data).max() <= 1e-9
    assert np.abs(base.offsets.data[perm] - moved.offsets.data).max() <= 1e-9


def test_zeroed_edge_mlp_equals_unbiased_model_bitwise():
    p = prepared(12, 5)
    biased = small_model(k=5, seed=2)
    unbiased = SpottingNetwork(with_ablation(biased.cfg, zero_edge_bias=True), seed=2, dtype=np.float64)
    for s in range(biased.cfg.stages):
        for name in ("edge2.w", "edge2.b"):
            biased.params[f"stage{s}.{name}"].data[...] = 0.0
    a, b = biased.forward(p.inputs), unbiased.forward(p.inputs)
    assert a.cosine.data.tobytes() == b.cosine.data.tobytes()
    assert a.offsets.data.tobytes() == b.offsets.data.tobytes()
    assert all(s.bias is None for s in b.stages)


def test_literal_block_is_bare_weighted_sum():
    m = small_model(k=3, literal_eq4=True)
    p = prepared(8, 3)
    f0 = m.vertex_features(p.inputs)
    st_ = m.stage(f0, p.inputs, 0)
    w = st_.weights.data  # (N, k, h)
    gathered = f0.data[p.inputs.neighbors].reshape(8, 3, 2, 6)
    want = (w[..., None] * gathered).sum(axis=1).reshape(8, 12)
    assert st_.features.data == pytest.approx(want, abs=1e-12)
    assert not any(k.startswith("stage0.v") or "ffn" in k for k in m.params)


def test_forward_output_shapes():
    m = small_model(k=4)
    out = m.forward(prepared(10, 4).inputs)
    assert out.cosine.shape == (10, 8) and out.offsets.shape == (10, 2)
    assert len(out.stages) == 4
    assert not out.offsets.data.any()  # offset head starts at zero


def test_checkpoint_round_trip(tmp_path):
    # Checkpoints hold float32 payloads, so compare float32 models.
    cfg = small_model().cfg
    a, b = SpottingNetwork(cfg, seed=1), SpottingNetwork(cfg, seed=2)
    a.save(tmp_path / "m.ckpt")
    b.load(tmp_path / "m.ckpt")
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_checkpoint_shape_mismatch(tmp_path):
    small_model().save(tmp_path / "m.ckpt")
    with pytest.raises(ad.ShapeError):
        small_model(dim=24, heads=2).load(tmp_path / "m.ckpt")


# ----------------------------------------------------------------- heads


def test_am_softmax_target_logit():
    w = Tensor(np.eye(3))
    cos = classification_cosine(Tensor(np.array([[2.0, 0.0, 0.0]])), w)
    assert cos.data.tolist() == [[1.0, 0.0, 0.0]]
    loss = am_softmax_loss(cos, np.array([0]), scale=30.0, margin=0.35)
    want = -19.5 + math.log(math.exp(19.5) + 2.0)
    assert float(loss.data) == pytest.approx(want, abs=1e-12)


def test_am_softmax_degenerates_to_cosine_cross_entropy():
    cos = Tensor(np.array([[0.2, -0.4, 0.9], [0.1, 0.5, -0.3]]))
    t = np.array([2, 0])
    plain = ad.cross_entropy_logits(cos, t)
    assert float(am_softmax_loss(cos, t, 1.0, 0.0).data) == float(plain.data)


@given(st.floats(0.01, 100.0))
def test_argmax_invariant_to_rescaling(c):
    rng = np.random.default_rng(0)
    f, w = rng.normal(size=(6, 12)), Tensor(rng.normal(size=(5, 12)))
    a = classification_cosine(Tensor(f), w).data.argmax(axis=1)
    b = classification_cosine(Tensor(f * c), w).data.argmax(axis=1)
    assert (a == b).all()


def test_instance_loss_cases():
    targets = np.array([[0.1, 0.2], [3.0, 4.0]])
    assert float(instance_loss(Tensor(targets.copy()), targets, np.ones(2)).data) == 0.0
    assert float(instance_loss(Tensor(np.zeros((2, 2))), targets, np.zeros(2)).data) == 0.0
    loss = instance_loss(Tensor(np.zeros((2, 2))), targets, np.array([0.0, 1.0]))
    assert float(loss.data) == 5.0


def test_total_loss_cases():
    cfg = ModelConfig()
    assert float(total_loss(2.0, 1.0, cfg).data) == pytest.approx(2.3, abs=1e-15)
    assert float(total_loss(2.0, 1.0, ModelConfig(lambda_ins=0.0)).data) == 2.0
    assert float(total_loss(0.0, 0.0, cfg).data) == 0.0
    with pytest.raises(ad.NumericError):
        total_loss(float("nan"), 1.0, cfg)


def test_text_rows_can_be_excluded_from_semantic_loss():
    p = prepared(12, 4)
    assert p.inputs.text_mask.any()
    on, off = small_model(), small_model(supervise_text=False)
    assert float(on.loss(p.inputs)[1].data) != float(off.loss(p.inputs)[1].data)


def test_loss_needs_targets():
    with pytest.raises(ValueError):
        small_model(k=3).loss(hand_inputs(4, 3))


@pytest.mark.parametrize("literal", [False, True])
def test_full_pipeline_gradient(literal):
    assert pipeline_gradcheck(literal_eq4=literal) < 1e-4
