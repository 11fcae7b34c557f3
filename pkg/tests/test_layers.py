import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from graphsh import layers as L
from graphsh import tensor as T
from graphsh.errors import ConfigError, ShapeError, ValidationError
from graphsh.gradcheck import parameter_gradcheck
from graphsh.rng import make_rng
from graphsh.skeleton import GraphScale, normalize_adjacency
from graphsh.tensor import Tensor


def param(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- vanilla


def test_vanilla_single_node_is_linear(rng):
    x, w, b = rng.normal(size=(3, 1, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    out = L.gconv_vanilla(Tensor(x), np.ones((1, 1)), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, x @ w + b, rtol=1e-14)


def test_vanilla_two_node_mixture():
    x = np.array([[[1.0, 2.0], [3.0, 6.0]]])
    adj = normalize_adjacency([(0, 1)], 2)
    out = L.gconv_vanilla(Tensor(x), adj, Tensor(np.eye(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [[[2.0, 4.0], [2.0, 4.0]]], rtol=1e-15)


def test_vanilla_permutation_equivariance(skeleton, rng):
    adj = skeleton.scales[0].adjacency_normalized
    x, w, b = rng.normal(size=(2, 16, 3)), rng.normal(size=(3, 5)), rng.normal(size=5)
    P = np.eye(16)[rng.permutation(16)]
    lhs = L.gconv_vanilla(Tensor(np.einsum("ij,bjc->bic", P, x)), P @ adj @ P.T, Tensor(w), Tensor(b)).data
    rhs = np.einsum("ij,bjc->bic", P, L.gconv_vanilla(Tensor(x), adj, Tensor(w), Tensor(b)).data)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_vanilla_shape_mismatch():
    with pytest.raises(ShapeError):
        L.gconv_vanilla(Tensor(np.zeros((1, 3, 2))), np.eye(4), Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))


# ---------------------------------------------------------------- semantic


def test_semantic_constant_logits_give_uniform_rows(skeleton):
    mask = skeleton.scales[0].support
    m = Tensor(np.repeat(np.arange(16.0)[:, None], 16, axis=1))
    eff = L.effective_adjacency(mask, m).data
    np.testing.assert_allclose(eff, mask / mask.sum(axis=1, keepdims=True), rtol=1e-14)


def test_semantic_single_node(rng):
    eff = L.effective_adjacency(np.ones((1, 1), bool), Tensor(rng.normal(size=(1, 1)))).data
    assert eff.tolist() == [[1.0]]


def test_semantic_without_self_weight_is_eff_x_w(skeleton, rng):
    mask = skeleton.scales[0].support
    x, m, w, b = rng.normal(size=(2, 16, 3)), rng.normal(size=(16, 16)), rng.normal(size=(3, 4)), rng.normal(size=4)
    eff = L.effective_adjacency(mask, Tensor(m)).data
    out = L.gconv_semantic(Tensor(x), mask, Tensor(m), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, eff @ x @ w + b, rtol=1e-12)
    tied = L.gconv_semantic(Tensor(x), mask, Tensor(m), Tensor(w), Tensor(b), Tensor(w)).data
    np.testing.assert_allclose(tied, out, rtol=1e-12, atol=1e-14)


def test_semantic_gradient_wrt_logits(skeleton, rng):
    mask = skeleton.scales[0].support
    x, read = Tensor(rng.normal(size=(2, 16, 3))), Tensor(rng.normal(size=(2, 16, 4)))
    m, w, ws, b = (param(rng.normal(size=s)) for s in [(16, 16), (3, 4), (3, 4), 4])
    loss = lambda: T.sum_all(T.multiply(L.gconv_semantic(x, mask, m, w, b, ws), read))
    errs = parameter_gradcheck(loss, {"m": m, "w": w, "w_self": ws, "b": b}, rng, entries_per_tensor=None)
    assert max(errs.values()) < 1e-4


def test_semantic_empty_mask_row():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(ValidationError):
        L.gconv_semantic(Tensor(np.zeros((1, 2, 1))), mask, Tensor(np.zeros((2, 2))), Tensor(np.ones((1, 1))), Tensor(np.zeros(1)))


# ---------------------------------------------------------------- preaggr


def test_preaggr_tied_weights_equal_vanilla(skeleton, rng):
    adj = skeleton.scales[0].adjacency_normalized
    for _ in range(20):
        x, w, b = rng.normal(size=(3, 16, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
        tied = Tensor(np.broadcast_to(w, (16, 4, 5)).copy())
        pre = L.gconv_preaggr(Tensor(x), adj, tied, tied, Tensor(b)).data
        van = L.gconv_vanilla(Tensor(x), adj, Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(pre, van, rtol=0, atol=1e-12)


def test_preaggr_single_node(rng):
    x, ws, b = rng.normal(size=(2, 1, 3)), rng.normal(size=(1, 3, 2)), rng.normal(size=2)
    adj = np.array([[0.7]])
    out = L.gconv_preaggr(Tensor(x), adj, Tensor(rng.normal(size=(1, 3, 2))), Tensor(ws), Tensor(b)).data
    np.testing.assert_allclose(out, 0.7 * x @ ws[0] + b, rtol=1e-14)


def test_preaggr_matches_loop_definition(skeleton, rng):
    adj = skeleton.scales[0].adjacency_normalized
    x, wn, ws, b = rng.normal(size=(2, 16, 3)), rng.normal(size=(16, 3, 2)), rng.normal(size=(16, 3, 2)), rng.normal(size=2)
    out = L.gconv_preaggr(Tensor(x), adj, Tensor(wn), Tensor(ws), Tensor(b)).data
    expected = np.zeros_like(out)
    for i in range(16):
        acc = adj[i, i] * x[:, i] @ ws[i] + b
        for j in range(16):
            if j != i:
                acc = acc + adj[i, j] * x[:, j] @ wn[j]
        expected[:, i] = acc
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-14)


def test_preaggr_per_node_weight_gradients(skeleton, rng):
    adj = skeleton.scales[0].adjacency_normalized
    x, read = Tensor(rng.normal(size=(2, 16, 3))), Tensor(rng.normal(size=(2, 16, 2)))
    wn, ws, b = param(rng.normal(size=(16, 3, 2))), param(rng.normal(size=(16, 3, 2))), param(rng.normal(size=2))
    loss = lambda: T.sum_all(T.multiply(L.gconv_preaggr(x, adj, wn, ws, b), read))
    errs = parameter_gradcheck(loss, {"wn": wn, "ws": ws, "b": b}, rng, entries_per_tensor=None)
    assert max(errs.values()) < 1e-4


def test_preaggr_wrong_weight_count(skeleton):
    adj = skeleton.scales[0].adjacency_normalized
    with pytest.raises(ValidationError, match="16"):
        L.gconv_preaggr(Tensor(np.zeros((1, 16, 2))), adj, Tensor(np.zeros((15, 2, 2))),
                        Tensor(np.zeros((15, 2, 2))), Tensor(np.zeros(2)))


# ---------------------------------------------------------------- node linear / conv block


def test_node_linear_identity_and_head_shape(rng):
    x = rng.normal(size=(2, 16, 4))
    np.testing.assert_array_equal(L.node_linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    head = L.NodeLinear(64, 3, make_rng(0))
    assert head(Tensor(rng.normal(size=(5, 16, 64)))).shape == (5, 16, 3)
    assert sum(p.size for p in head.parameters()) == 195


def test_node_linear_commutes_with_node_permutation(rng):
    x, w, b = rng.normal(size=(2, 16, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    perm = rng.permutation(16)
    out = L.node_linear(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_array_equal(L.node_linear(Tensor(x[:, perm]), Tensor(w), Tensor(b)).data, out[:, perm])


def test_conv_block_infer_with_identity_bn(skeleton, rng):
    block = L.ConvBlock("vanilla", 3, 4, skeleton.scales[0], make_rng(0), dropout_p=0.25)
    block.bn.eps = 0.0
    x = Tensor(rng.normal(size=(2, 16, 3)))
    out = block(x, "infer").data
    np.testing.assert_allclose(out, np.maximum(block.conv(x).data, 0.0), rtol=1e-15)
    assert (out >= 0).all()


def test_conv_block_train_applies_dropout(skeleton, rng):
    block = L.ConvBlock("preaggr", 3, 8, skeleton.scales[0], make_rng(0), dropout_p=0.25)
    x = Tensor(rng.normal(size=(4, 16, 3)))
    a = block(x, "train", make_rng(5))
    b = block(x, "train", make_rng(5))
    np.testing.assert_array_equal(a.data, b.data)
    assert a.op.kind == "dropout"
    assert (a.data >= 0).all()


def test_graph_conv_unknown_kind(skeleton):
    with pytest.raises(ConfigError):
        L.GraphConv("spectral", 2, 2, skeleton.scales[0], make_rng(0))


@pytest.mark.parametrize("kind,expected", [
    ("vanilla", 2 * 64 + 64),
    ("semantic", 2 * 2 * 64 + 16 * 16 + 64),
    ("preaggr", 2 * 16 * 2 * 64 + 64),
])
def test_graph_conv_parameter_counts(skeleton, kind, expected):
    conv = L.GraphConv(kind, 2, 64, skeleton.scales[0], make_rng(0))
    assert sum(p.size for p in conv.parameters()) == expected


def test_initialization_rule(skeleton):
    conv = L.GraphConv("semantic", 64, 96, skeleton.scales[0], make_rng(0))
    bound = np.sqrt(6 / (64 + 96))
    assert np.abs(conv.w.data).max() <= bound
    assert np.abs(conv.w.data).max() > 0.9 * bound
    assert (conv.b.data == 0).all() and (conv.m.data == 0).all()
    bn = L.BatchNorm(8)
    assert (bn.gain.data == 1).all() and (bn.bias.data == 0).all()


# ---------------------------------------------------------------- SE block


def test_se_zero_weights_halve_features(rng):
    f = rng.normal(size=(3, 16, 64))
    out = L.se_block(Tensor(f), Tensor(np.zeros((8, 64))), Tensor(np.zeros((64, 8)))).data
    np.testing.assert_array_equal(out, 0.5 * f)


@given(st.integers(0, 2**32 - 1))
def test_se_scales_each_channel_by_a_gate_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(2, 16, 16))
    se = L.SEBlock(16, 4, make_rng(seed))
    out = se(Tensor(f)).data
    s = out / np.where(f == 0, 1, f)
    np.testing.assert_allclose(s, np.broadcast_to(s[:, :1], s.shape), rtol=1e-9)
    assert (s > 0).all() and (s < 1).all()
    assert (np.abs(out) <= np.abs(f)).all()


def test_se_gradients(rng):
    f = rng.normal(size=(2, 16, 8))
    read = Tensor(rng.normal(size=(2, 16, 8)))
    w1, w2 = param(rng.normal(size=(2, 8))), param(rng.normal(size=(8, 2)))
    ft = param(f)
    loss = lambda: T.sum_all(T.multiply(L.se_block(ft, w1, w2), read))
    assert max(parameter_gradcheck(loss, {"f": ft, "w1": w1, "w2": w2}, rng, None).values()) < 1e-4


def test_se_ratio_must_divide():
    with pytest.raises(ConfigError):
        L.SEBlock(12, 8, make_rng(0))


def test_layers_preserve_node_count(skeleton, rng):
    x = Tensor(rng.normal(size=(2, 16, 6)))
    for kind in L.CONV_KINDS:
        assert L.GraphConv(kind, 6, 9, skeleton.scales[0], make_rng(0))(x).shape == (2, 16, 9)
    small = GraphScale.from_edges([(0, 1)], 2)
    assert L.GraphConv("preaggr", 6, 3, small, make_rng(0))(Tensor(np.ones((1, 2, 6)))).shape == (1, 2, 3)
