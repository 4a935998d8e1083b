import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cladnet import autograd as ag
from cladnet.autograd import ShapeError
from cladnet.checkpoint import load_checkpoint, restore, save_checkpoint
from cladnet.classifier import (
    CNNClassifier,
    CNNConfig,
    cnn_forward,
    cross_entropy,
    distillation_loss,
    fuse_and_classify,
    snapshot,
    supervised_loss,
    supervised_train_step,
)
from cladnet.gradcheck import finite_difference_check
from cladnet.optim import Adam
from cladnet.sslnet import BodyPartition, CrossAttentionTransformer, TransformerConfig
from oracles import cnn_features_loop, cross_entropy_loop, head_loop, kl_loop, l2_loop, rel_err

TINY = CNNConfig(kernel_size=3, widths=(3, 4), convs_per_block=2, pool=2)


def tiny_cnn(seed=0, rep_dim=0, cfg=TINY, in_channels=2, n_classes=3):
    return CNNClassifier(in_channels, n_classes, cfg, np.random.default_rng(seed), rep_dim=rep_dim)


def perturb(model, rng, scale=0.2):
    for p in model.params.values():
        p.data = p.data + scale * rng.normal(size=p.shape)


# ------------------------------------------------------------------- forward


def test_zero_input_gives_zero_features():
    model = tiny_cnn(cfg=CNNConfig(widths=(4, 4, 6)))
    h = cnn_forward(np.zeros((2, 16, 2)), model).data
    np.testing.assert_array_equal(h, 0.0)


def test_default_architecture_shape():
    cfg = CNNConfig()
    model = CNNClassifier(6, 5, cfg, np.random.default_rng(0), rep_dim=8)
    assert len(cfg.widths) == 3 and cfg.convs_per_block == 4
    assert sum(k.startswith("block.0.conv.") and k.endswith("weight") for k in model.params) == 4
    logits = model(np.random.default_rng(1).normal(size=(2, 32, 6)), np.zeros((2, 8)))
    assert logits.shape == (2, 5)


def test_eval_forward_is_deterministic():
    model = tiny_cnn()
    x = np.random.default_rng(0).normal(size=(3, 8, 2))
    np.testing.assert_array_equal(cnn_forward(x, model).data, cnn_forward(x, model).data)


@pytest.mark.parametrize("widths", [(3, 4), (2, 2), (5,)])
def test_features_match_straight_line_oracle(widths):
    cfg = CNNConfig(kernel_size=3, widths=widths, convs_per_block=2, pool=2)
    model = tiny_cnn(seed=1, cfg=cfg)
    perturb(model, np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=(2, 8, 2))
    params = {k: p.data for k, p in model.params.items()}
    got = model.features(x).data
    for b in range(2):
        want = cnn_features_loop(x[b], params, len(widths), 2, 2, cfg.ln_eps)
        assert rel_err(got[b], want) < 1e-10


def test_logits_match_oracle_with_fusion():
    model = tiny_cnn(seed=4, rep_dim=3)
    perturb(model, np.random.default_rng(5))
    x = np.random.default_rng(6).normal(size=(2, 8, 2))
    r = np.random.default_rng(7).normal(size=(2, 3))
    params = {k: p.data for k, p in model.params.items()}
    got = model(x, r).data
    for b in range(2):
        h = cnn_features_loop(x[b], params, 2, 2, 2, TINY.ln_eps)
        assert rel_err(got[b], head_loop(h, r[b], params["head.weight"], params["head.bias"])) < 1e-10


def test_channel_mismatch_raises():
    with pytest.raises(ShapeError):
        tiny_cnn()(np.zeros((1, 8, 3)))


# -------------------------------------------------------------------- fusion


def test_fuse_zero_weights_give_bias():
    bias = np.array([0.5, -1.0])
    out = fuse_and_classify(np.ones((3, 2)), np.ones((3, 4)), np.zeros((6, 2)), bias).data
    np.testing.assert_array_equal(out, np.tile(bias, (3, 1)))


def test_fuse_matches_matmul_oracle_and_concat_order():
    rng = np.random.default_rng(0)
    h, r = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    w, b = rng.normal(size=(5, 3)), rng.normal(size=3)
    got = fuse_and_classify(h, r, w, b).data
    want = np.stack([head_loop(h[i], r[i], w, b) for i in range(4)])
    assert rel_err(got, want) < 1e-12
    # swapping the two inputs together with the weight row blocks leaves the logits unchanged
    swapped = fuse_and_classify(r, h, np.vstack([w[3:], w[:3]]), b).data
    np.testing.assert_allclose(swapped, got, rtol=0, atol=1e-12)
    single = fuse_and_classify(h[0], r[0], w, b).data
    np.testing.assert_allclose(single, got[0], rtol=0, atol=1e-12)


def test_fuse_width_mismatch():
    with pytest.raises(ShapeError):
        fuse_and_classify(np.ones((2, 3)), np.ones((2, 2)), np.zeros((4, 2)), np.zeros(2))


def test_no_gradient_flows_into_representation():
    rng = np.random.default_rng(0)
    h = ag.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    r = ag.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    w = ag.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    with ag.GradTape() as tape:
        loss = ag.tsum(fuse_and_classify(h, r, w, np.zeros(2)))
    grads = tape.backward(loss)
    assert grads.get(r) is None and grads.get(h) is not None


def test_supervised_loss_leaves_transformer_untouched():
    part = BodyPartition.contiguous([1, 1])
    tr = CrossAttentionTransformer(part, TransformerConfig(d_model=4, heads=1, dropout=0.0), np.random.default_rng(0))
    model = tiny_cnn(rep_dim=4)
    x = np.random.default_rng(1).normal(size=(5, 8, 2))
    y = np.array([0, 1, 2, 0, 1])
    with ag.GradTape() as tape:
        total, _, _ = supervised_loss(model, x, y, tr(x), snapshot(model), 1.0)
    grads = tape.backward(total)
    assert all(grads.get(p) is None for p in tr.params.values())
    assert all(grads.get(p) is not None for p in model.params.values())


# -------------------------------------------------------------- distillation


def test_distillation_examples():
    assert distillation_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])).item() == pytest.approx(2.0)
    s = np.random.default_rng(0).normal(size=(4, 3))
    for mode in ("l2_logits", "kl_softmax"):
        assert distillation_loss(s, s.copy(), mode).item() == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        distillation_loss(s, s, "cosine")
    with pytest.raises(ShapeError):
        distillation_loss(s, s[:, :2])


def test_distillation_matches_loop_oracles():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        s, t = rng.normal(size=(3, 4)) * 2, rng.normal(size=(3, 4)) * 2
        assert rel_err(distillation_loss(s, t, "kl_softmax").item(), kl_loop(t, s)) < 1e-10
        assert rel_err(distillation_loss(s, t, "l2_logits").item(), l2_loop(t, s)) < 1e-12


def test_kl_is_shift_invariant():
    rng = np.random.default_rng(0)
    s, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    base = distillation_loss(s, t, "kl_softmax").item()
    assert distillation_loss(s + 5.0, t - 2.0, "kl_softmax").item() == pytest.approx(base, rel=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.integers(2, 5), st.integers(0, 2**31), st.sampled_from(["l2_logits", "kl_softmax"]))
def test_distillation_nonnegative(B, C, seed, mode):
    rng = np.random.default_rng(seed)
    assert distillation_loss(rng.normal(size=(B, C)) * 3, rng.normal(size=(B, C)) * 3, mode).item() >= -1e-15


def test_cross_entropy_matches_oracle_and_vanishes_on_confident_predictions():
    rng = np.random.default_rng(0)
    logits, y = rng.normal(size=(5, 3)), np.array([0, 2, 1, 1, 0])
    assert rel_err(cross_entropy(ag.Tensor(logits), y).item(), cross_entropy_loop(logits, y)) < 1e-12
    perfect = np.full((3, 3), -50.0)
    perfect[np.arange(3), [2, 0, 1]] = 50.0
    assert cross_entropy(ag.Tensor(perfect), np.array([2, 0, 1])).item() < 1e-40


# ---------------------------------------------------------------- train step


def _batch(seed=0, n=6):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 8, 2)), rng.integers(0, 3, size=n), rng.normal(size=(n, 3))


def test_total_equals_ce_without_teacher_or_with_zero_weight():
    model = tiny_cnn(rep_dim=3)
    x, y, r = _batch()
    total, ce, distill = supervised_loss(model, x, y, r)
    assert distill is None and total.item() == ce.item()
    teacher = snapshot(tiny_cnn(seed=9, rep_dim=3))
    total, ce, distill = supervised_loss(model, x, y, r, teacher, lambda_distill=0.0)
    assert distill.item() > 0 and total.item() == ce.item()


def test_self_teacher_adds_nothing_to_gradient():
    model = tiny_cnn(rep_dim=3)
    x, y, r = _batch()
    params = list(model.params.values())

    def grads(teacher):
        with ag.GradTape() as tape:
            total, _, distill = supervised_loss(model, x, y, r, teacher, 1.0)
        g = tape.backward(total)
        return [g[p] for p in params], 0.0 if distill is None else distill.item()

    plain, _ = grads(None)
    for mode_teacher in (snapshot(model),):
        with_teacher, d = grads(mode_teacher)
        assert d == 0.0
        for a, b in zip(plain, with_teacher):
            np.testing.assert_allclose(b, a, rtol=1e-10, atol=1e-14)


def test_train_step_skips_unlabeled_batches_and_filters_unlabeled_rows():
    model = tiny_cnn()
    opt = Adam(model.params, lr=1e-2)
    x, _, _ = _batch()
    before = model.state_dict()
    assert supervised_train_step(x, np.full(6, -1), model, opt) is None
    assert all(np.array_equal(before[k], p.data) for k, p in model.params.items())
    y = np.array([0, -1, 1, -1, 2, 0])
    res = supervised_train_step(x, y, model, opt)
    keep = y >= 0
    fresh = tiny_cnn()
    assert res.ce == pytest.approx(cross_entropy(fresh(x[keep]), y[keep]).item(), rel=1e-12)
    with pytest.raises(ValueError):
        supervised_train_step(x, y, model, opt, lambda_distill=-1.0)


def test_large_distillation_weight_pins_student_to_teacher():
    """A linear head trained with a huge distillation weight lands on the teacher's outputs."""
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(20, 4))
    y = rng.integers(0, 3, size=20)
    t_w, t_b = rng.normal(size=(4, 3)), rng.normal(size=3)
    teacher = feats @ t_w + t_b
    w = ag.Tensor(np.zeros((4, 3)), requires_grad=True)
    b = ag.Tensor(np.zeros(3), requires_grad=True)
    opt = Adam({"w": w, "b": b}, lr=0.05)
    for _ in range(3000):
        with ag.GradTape() as tape:
            logits = fuse_and_classify(feats, None, w, b)
            loss = cross_entropy(logits, y) + 1e6 * distillation_loss(logits, teacher)
        opt.step(tape.backward(loss))
    gap = np.abs(fuse_and_classify(feats, None, w, b).data - teacher).mean()
    assert gap < 1e-2


@pytest.mark.parametrize("mode", ["l2_logits", "kl_softmax"])
def test_total_loss_gradient_matches_finite_differences(mode):
    model = tiny_cnn(seed=3, rep_dim=3)
    perturb(model, np.random.default_rng(4), 0.1)
    teacher = snapshot(tiny_cnn(seed=5, rep_dim=3))
    x, y, r = _batch(6, n=4)
    params = list(model.params.values())
    for t in (None, teacher):
        err = finite_difference_check(lambda: supervised_loss(model, x, y, r, t, 0.7, mode)[0], params)
        assert err < 1e-4


# ----------------------------------------------------------------- snapshots


def test_snapshot_is_immutable_during_training():
    model = tiny_cnn(rep_dim=3)
    snap = snapshot(model, subject=2)
    x, y, r = _batch()
    before = snap.outputs(x, r)
    checksum = snap.checksum()
    opt = Adam(model.params, lr=1e-2)
    for _ in range(10):
        supervised_train_step(x, y, model, opt, r, snap, 1.0)
    assert snap.checksum() == checksum and snap.verify()
    np.testing.assert_array_equal(snap.outputs(x, r), before)
    assert not np.array_equal(model.predict(x, r), before)
    with pytest.raises(ValueError):
        snap.model.params["head.bias"].data[0] = 1.0


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = tiny_cnn(rep_dim=4)
    perturb(model, np.random.default_rng(1))
    part = BodyPartition.contiguous([1, 1])
    tr = CrossAttentionTransformer(part, TransformerConfig(d_model=4, heads=1), np.random.default_rng(2))
    path = save_checkpoint(tmp_path / "c.npz", model, tr, {"subject": 3})
    states, meta = load_checkpoint(path)
    assert meta["subject"] == 3
    model2, tr2 = tiny_cnn(seed=7, rep_dim=4), CrossAttentionTransformer(part, TransformerConfig(d_model=4, heads=1), np.random.default_rng(8))
    restore(model2, states["cnn"])
    restore(tr2, states["transformer"])
    x = np.random.default_rng(3).normal(size=(5, 8, 2))
    r = tr.represent(x)
    np.testing.assert_array_equal(tr2.represent(x), r)
    np.testing.assert_array_equal(snapshot(model2).outputs(x, r), snapshot(model).outputs(x, r))
