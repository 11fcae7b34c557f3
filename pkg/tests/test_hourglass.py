import numpy as np
import pytest

from graphsh import tensor as T
from graphsh.errors import ShapeError
from graphsh.hourglass import Hourglass, hourglass_forward, hourglass_init
from graphsh.rng import make_rng
from graphsh.tensor import Tensor, backward

LADDER = [("input", 16), ("down16", 16), ("down8", 8), ("low4", 4), ("up8", 8), ("up16", 16)]


def _serialized(hg):
    return b"".join(p.data.tobytes() for _, p in hg.named_parameters())


def test_default_widths(skeleton):
    hg = hourglass_init("preaggr", (64, 96, 128), skeleton, make_rng(0))
    widths = [(b.conv.in_channels, b.out_channels) for b in hg.down16 + hg.down8 + hg.low4 + hg.up8 + hg.up16]
    assert widths == [(64, 96), (96, 128), (128, 128), (128, 96), (96, 64)]
    assert not hasattr(hg, "skip8") and not hasattr(hg, "skip16")


def test_init_is_seed_deterministic(skeleton):
    a = _serialized(hourglass_init("semantic", (8, 12, 16), skeleton, make_rng(3)))
    b = _serialized(hourglass_init("semantic", (8, 12, 16), skeleton, make_rng(3)))
    c = _serialized(hourglass_init("semantic", (8, 12, 16), skeleton, make_rng(4)))
    assert a == b and a != c


@pytest.mark.parametrize("widen", ["pre_pool", "post_pool"])
@pytest.mark.parametrize("kind", ["vanilla", "semantic", "preaggr"])
def test_shape_and_node_ladder(skeleton, rng, kind, widen):
    hg = Hourglass(kind, (64, 96, 128), skeleton, make_rng(0), widen=widen)
    trace = []
    out = hg(Tensor(rng.normal(size=(2, 16, 64))), "train", make_rng(1), trace)
    assert out.shape == (2, 16, 64)
    assert [(s, n) for s, n, _ in trace] == LADDER


def test_post_pool_uses_skip_adapters(skeleton):
    hg = Hourglass("vanilla", (8, 12, 16), skeleton, make_rng(0), widen="post_pool")
    assert hg.skip8.w.shape == (12, 16) and hg.skip16.w.shape == (8, 12)


def test_without_pooling_stays_at_sixteen_joints(skeleton, rng):
    hg = Hourglass("preaggr", (8, 12, 16), skeleton, make_rng(0), pooling=False)
    trace = []
    hg(Tensor(rng.normal(size=(2, 16, 8))), "infer", None, trace)
    assert {n for _, n, _ in trace} == {16}


def test_wrong_input_names_stage(skeleton):
    hg = Hourglass("vanilla", (8, 12, 16), skeleton, make_rng(0))
    with pytest.raises(ShapeError, match="hourglass input"):
        hourglass_forward(Tensor(np.zeros((1, 8, 8))), hg, "infer")


def test_infer_forward_is_deterministic(skeleton, rng):
    hg = Hourglass("semantic", (8, 12, 16), skeleton, make_rng(0))
    x = Tensor(rng.normal(size=(3, 16, 8)))
    np.testing.assert_array_equal(hg(x, "infer").data, hg(x, "infer").data)


def test_every_parameter_receives_gradient(skeleton, rng):
    # infer mode: train-mode BN would cancel each conv bias exactly
    hg = Hourglass("semantic", (8, 12, 16), skeleton, make_rng(0))
    x = Tensor(rng.normal(size=(4, 16, 8)))
    read = Tensor(rng.normal(size=(4, 16, 8)))
    grads = backward(T.sum_all(T.multiply(hg(x, "infer"), read)))
    dead = [n for n, p in hg.named_parameters() if not np.any(grads[p])]
    assert dead == []
