import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cladnet import autograd as ag
from cladnet.dataio import pamap2_config
from cladnet.gradcheck import finite_difference_check
from cladnet.sslnet import (
    BodyPartition,
    CrossAttentionTransformer,
    TransformerConfig,
    aggregate,
    cross_attention_branch,
    partition,
    positional_encoding,
)
from oracles import attention_loop, positional_encoding_loop, rel_err, scaled_err, transformer_loop


def tiny(widths=(2, 2), d_model=4, heads=1, dropout=0.0, attention="cross", query=0, seed=0):
    part = BodyPartition.contiguous(widths, query)
    cfg = TransformerConfig(d_model=d_model, heads=heads, dropout=dropout, attention=attention)
    return CrossAttentionTransformer(part, cfg, np.random.default_rng(seed))


def perturb(model, rng, scale=0.3):
    """Non-trivial biases and norm parameters so the oracle exercises every term."""
    for p in model.params.values():
        p.data = p.data + scale * rng.normal(size=p.shape)


# --------------------------------------------------------------- partition


def test_partition_round_trip():
    x = np.random.default_rng(0).normal(size=(3, 5, 6))
    p = BodyPartition(((4, 0), (1, 2), (5, 3)))
    parts = partition(x, p)
    back = np.zeros_like(x)
    for g, xi in zip(p.groups, parts):
        back[..., list(g)] = xi
    np.testing.assert_array_equal(back, x)


def test_single_part_is_identity():
    x = np.random.default_rng(1).normal(size=(4, 3))
    (only,) = partition(x, BodyPartition.contiguous([3]))
    np.testing.assert_array_equal(only, x)


def test_partition_must_cover_channels():
    x = np.zeros((4, 5))
    with pytest.raises(ValueError):
        partition(x, BodyPartition.contiguous([2, 2]))
    with pytest.raises(ValueError):
        BodyPartition(((0, 1), (1, 2)))
    with pytest.raises(ValueError):
        BodyPartition(((0,),), query=1)


def test_pamap2_default_partition():
    cfg = pamap2_config()
    p = BodyPartition.from_names(cfg.channels, cfg.body_parts, cfg.query_part)
    assert p.n_parts == 3
    assert p.names[p.query] == "hand"
    assert p.n_channels == len(cfg.channels)


# ----------------------------------------------------------------- embedding


def test_positional_encoding_values():
    pe = positional_encoding(5, 6)
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1])
    np.testing.assert_allclose(pe, positional_encoding_loop(5, 6), rtol=0, atol=1e-14)
    np.testing.assert_allclose(positional_encoding(7, 5), positional_encoding_loop(7, 5), rtol=0, atol=1e-14)


def test_zero_input_embeds_to_position_code():
    model = tiny(widths=(3,), d_model=4)
    (z,) = model.embed(np.zeros((6, 3)))
    np.testing.assert_array_equal(z.data, positional_encoding(6, 4))


def test_embedding_matches_direct_formula():
    model = tiny(widths=(3, 1), d_model=4, seed=1)
    perturb(model, np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=(2, 5, 4))
    z = model.embed(x)
    pe = positional_encoding_loop(5, 4)
    for i, g in enumerate(model.partition.groups):
        w, b = model.params[f"embed.{i}.weight"].data, model.params[f"embed.{i}.bias"].data
        want = np.einsum("blc,cd->bld", x[..., list(g)], w) + b + pe
        assert rel_err(z[i].data, want) < 1e-12


# ----------------------------------------------------------------- attention


def test_identical_keys_give_uniform_weights():
    rng = np.random.default_rng(0)
    D, heads, length = 3, 2, 4
    w = [rng.normal(size=(heads, D, D)) for _ in range(3)] + [rng.normal(size=(heads * D, D))]
    z_q = rng.normal(size=(length, D))
    row = rng.normal(size=D)
    z_i = np.tile(row, (length, 1))
    out, weights = cross_attention_branch(z_q, z_i, *w, return_weights=True)
    np.testing.assert_allclose(weights, 1.0 / length, atol=1e-15)
    # every output row is the value projection of the shared key row
    expected = np.concatenate([row @ w[2][h] for h in range(heads)]) @ w[3]
    np.testing.assert_allclose(out.data, np.tile(expected, (length, 1)), atol=1e-12)


def test_single_step_single_head_with_identity_weights():
    z_i = np.array([[0.3, -1.2, 2.0]])
    eye = np.eye(3)[None]
    out = cross_attention_branch(np.array([[5.0, 1.0, -1.0]]), z_i, eye, eye, eye, np.eye(3))
    np.testing.assert_allclose(out.data, z_i, atol=1e-15)


def test_branch_matches_loop_oracle():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        D, heads, length = 2, 2, 3
        w = [rng.normal(size=(heads, D, D)) for _ in range(3)] + [rng.normal(size=(heads * D, D))]
        z_q, z_i = rng.normal(size=(length, D)), rng.normal(size=(length, D))
        got, weights = cross_attention_branch(z_q, z_i, *w, return_weights=True)
        want, want_w = attention_loop(z_q, z_i, *w)
        worst = max(worst, rel_err(got.data, want), rel_err(weights, np.array(want_w)))
    assert worst < 1e-10


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31), st.floats(0.1, 30.0))
def test_attention_rows_sum_to_one(length, D, heads, seed, scale):
    rng = np.random.default_rng(seed)
    w = [scale * rng.normal(size=(heads, D, D)) for _ in range(3)] + [rng.normal(size=(heads * D, D))]
    _, weights = cross_attention_branch(rng.normal(size=(length, D)), rng.normal(size=(length, D)), *w, return_weights=True)
    assert np.all(weights >= 0) and np.all(np.isfinite(weights))
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)


# ----------------------------------------------------------------- aggregate


def test_aggregate_examples():
    a = np.random.default_rng(0).normal(size=(3, 2))
    np.testing.assert_array_equal(aggregate([a]).data, a)
    np.testing.assert_allclose(aggregate([a, -a]).data, 0.0, atol=0)
    np.testing.assert_allclose(aggregate([a, 2 * a, 3 * a]).data, 2 * a, rtol=1e-15)
    with pytest.raises(ValueError):
        aggregate([])


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31), st.randoms(use_true_random=False))
def test_aggregate_is_permutation_symmetric(n, seed, rnd):
    branches = list(np.random.default_rng(seed).normal(size=(n, 3, 2)))
    order = list(range(n))
    rnd.shuffle(order)
    a = aggregate(branches).data
    b = aggregate([branches[i] for i in order]).data
    assert scaled_err(a, b) <= 1e-12


def test_permuting_non_query_parts_leaves_representation_unchanged():
    """Reordering body parts (with their parameters) other than the query changes nothing."""
    widths = (2, 1, 3, 2)
    model = tiny(widths=widths, d_model=4, heads=2, seed=3)
    perturb(model, np.random.default_rng(4), 0.1)
    x = np.random.default_rng(5).normal(size=(3, 6, sum(widths)))
    base = model.represent(x)
    rng = np.random.default_rng(6)
    for _ in range(20):
        order = [0] + list(rng.permutation([1, 2, 3]))
        groups = tuple(model.partition.groups[i] for i in order)
        other = CrossAttentionTransformer(BodyPartition(groups, 0), model.cfg, np.random.default_rng(0))
        state = model.state_dict()
        for new, old in enumerate(order):
            for key in list(state):
                for prefix in ("embed", "branch"):
                    if key.startswith(f"{prefix}.{old}."):
                        other.params[key.replace(f"{prefix}.{old}.", f"{prefix}.{new}.", 1)].data = state[key].copy()
        for key in state:
            if key.startswith(("ff.", "norm.")):
                other.params[key].data = state[key].copy()
        assert scaled_err(other.represent(x), base) <= 1e-12


# ------------------------------------------------------------------ forward


@pytest.mark.parametrize("attention", ["cross", "self"])
def test_forward_matches_straight_line_oracle(attention):
    model = tiny(widths=(2, 2), d_model=4, heads=1, attention=attention, query=1, seed=11)
    perturb(model, np.random.default_rng(12))
    x = np.random.default_rng(13).normal(size=(2, 4, 4))
    got = model.represent(x)
    params = {k: p.data for k, p in model.params.items()}
    for b in range(2):
        want = transformer_loop(x[b], params, model.partition.groups, 1, 1, 3, model.cfg.ln_eps, attention)
        assert rel_err(got[b], want) < 1e-10


def test_two_head_forward_matches_oracle():
    model = tiny(widths=(1, 2, 1), d_model=4, heads=2, seed=2)
    perturb(model, np.random.default_rng(3))
    x = np.random.default_rng(4).normal(size=(5, 4))
    params = {k: p.data for k, p in model.params.items()}
    want = transformer_loop(x, params, model.partition.groups, 0, 2, 3, model.cfg.ln_eps)
    assert rel_err(model.represent(x[None])[0], want) < 1e-10


def test_eval_forward_is_deterministic():
    model = tiny(dropout=0.3)
    x = np.random.default_rng(0).normal(size=(4, 8, 4))
    np.testing.assert_array_equal(model(x).data, model(x).data)


def test_zero_dropout_train_equals_eval():
    model = tiny(dropout=0.0)
    x = np.random.default_rng(0).normal(size=(4, 8, 4))
    np.testing.assert_array_equal(model(x, train=True, rng=np.random.default_rng(1)).data, model(x).data)


def test_dropout_train_mode_needs_rng_and_changes_output():
    model = tiny(dropout=0.5)
    x = np.random.default_rng(0).normal(size=(4, 8, 4))
    with pytest.raises(ValueError):
        model(x, train=True)
    a = model(x, train=True, rng=np.random.default_rng(1)).data
    assert not np.allclose(a, model(x).data)


def test_represent_chunks_match_full_batch():
    model = tiny()
    x = np.random.default_rng(0).normal(size=(7, 6, 4))
    np.testing.assert_allclose(model.represent(x, batch_size=3), model(x).data, rtol=0, atol=1e-14)
    assert model.represent(x[:0]).shape == (0, 4)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(2, 9), st.integers(0, 2**31))
def test_output_shape_and_finiteness(batch, length, seed):
    model = tiny(widths=(1, 3), d_model=4, heads=2, seed=seed % 7)
    x = np.random.default_rng(seed).normal(size=(batch, length, 4)) * 5
    r = model(x).data
    assert r.shape == (batch, 4) and np.isfinite(r).all()


# ---------------------------------------------------------------- gradients


def test_branch_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    D, heads, length = 3, 2, 4
    ws = [ag.Tensor(rng.normal(size=(heads, D, D)), requires_grad=True) for _ in range(3)]
    ws.append(ag.Tensor(rng.normal(size=(heads * D, D)), requires_grad=True))
    z_q = ag.Tensor(rng.normal(size=(length, D)), requires_grad=True)
    z_i = ag.Tensor(rng.normal(size=(length, D)), requires_grad=True)
    v = rng.normal(size=(length, D))
    err = finite_difference_check(lambda: ag.tsum(cross_attention_branch(z_q, z_i, *ws) * v), ws + [z_q, z_i])
    assert err < 1e-4


def test_transformer_gradient_matches_finite_differences():
    model = tiny(widths=(2, 2), d_model=4, heads=1, query=1, seed=5)
    perturb(model, np.random.default_rng(6), 0.1)
    x = np.random.default_rng(7).normal(size=(2, 4, 4))
    v = np.random.default_rng(8).normal(size=(2, 4))
    err = finite_difference_check(lambda: ag.tsum(model(x) * v), list(model.params.values()))
    assert err < 1e-4
