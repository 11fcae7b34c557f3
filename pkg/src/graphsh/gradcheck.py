"""Central finite-difference checks of analytic gradients.

Error metric per entry: ``|analytic - numeric| / max(1, |analytic|, |numeric|)``;
every check returns the maximum over the entries it inspects.

Each named suite in :data:`SUITES` takes a seed and returns that maximum for
one operation, layer or composite; :func:`run_suites` drives them for the
``gradcheck`` command.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Iterable

import numpy as np

from . import layers as L
from . import tensor as T
from .config import NetworkConfig
from .hourglass import Hourglass
from .network import build_model
from .rng import make_rng
from .skeleton import build_default_skeleton
from .tensor import Tensor

DEFAULT_STEP = 1e-5
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def _central(fn: Callable[[], float], arr: np.ndarray, idx: tuple, step: float) -> float:
    orig = arr[idx]
    arr[idx] = orig + step
    up = fn()
    arr[idx] = orig - step
    down = fn()
    arr[idx] = orig
    return (up - down) / (2.0 * step)


def finite_difference_gradcheck(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = DEFAULT_STEP,
                                indices: Iterable[tuple] | None = None) -> float:
    """Max relative error between backward() and central differences of scalar ``f`` at ``x``.

    ``f`` must be deterministic; ``indices`` restricts the check to those entries.
    """
    x = np.array(x, dtype=np.float64)
    leaf = Tensor(x, requires_grad=True)
    analytic = T.backward(f(leaf))[leaf]
    probe = x.copy()
    idxs = list(np.ndindex(x.shape)) if indices is None else [tuple(np.atleast_1d(i)) for i in indices]
    numeric = [_central(lambda: f(Tensor(probe)).item(), probe, i, step) for i in idxs]
    return relative_error([analytic[i] for i in idxs], numeric)


def parameter_gradcheck(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], rng: np.random.Generator,
                        entries_per_tensor: int | None = 3, step: float = DEFAULT_STEP) -> dict[str, float]:
    """Per-parameter max relative error for a scalar ``loss_fn()`` built from ``params``.

    Samples ``entries_per_tensor`` entries of each tensor (all entries if None);
    parameters are perturbed in place and restored.
    """
    grads = T.backward(loss_fn())
    out = {}
    for name, p in params.items():
        if entries_per_tensor is None or p.size <= entries_per_tensor:
            flat = np.arange(p.size)
        else:
            flat = rng.choice(p.size, entries_per_tensor, replace=False)
        idxs = [np.unravel_index(int(k), p.shape) for k in flat]
        numeric = [_central(lambda: loss_fn().item(), p.data, i, step) for i in idxs]
        out[name] = relative_error([grads[p][i] for i in idxs], numeric)
    return out


# ---------------------------------------------------------------------------
# suites


def _away_from_zero(rng, shape, lo=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


def _projector(rng, shape):
    """Random linear read-out so gradients are not all-equal."""
    r = Tensor(rng.normal(size=shape))
    return lambda t: T.sum_all(T.multiply(t, r))


def _check_inputs(rng, make: Callable[..., Tensor], *arrays: np.ndarray) -> float:
    """Check ``make(*tensors)`` w.r.t. every input in turn, holding the others fixed."""
    out_shape = make(*[Tensor(a) for a in arrays]).shape
    read = _projector(rng, out_shape)
    worst = 0.0
    for k in range(len(arrays)):
        def f(t, k=k):
            args = [Tensor(a) for a in arrays]
            args[k] = t
            return read(make(*args))
        worst = max(worst, finite_difference_gradcheck(f, arrays[k]))
    return worst


def _suite_matmul(seed):
    rng = make_rng(seed)
    return _check_inputs(rng, T.matmul, rng.normal(size=(4, 3)), rng.normal(size=(3, 5)))


def _suite_aggregate(seed):
    rng = make_rng(seed)
    return _check_inputs(rng, T.aggregate, rng.normal(size=(6, 6)), rng.normal(size=(2, 6, 3)))


def _suite_node_matmul(seed):
    rng = make_rng(seed)
    return _check_inputs(rng, T.node_matmul, rng.normal(size=(2, 5, 3)), rng.normal(size=(5, 3, 4)))


def _suite_elementwise(seed):
    rng = make_rng(seed)
    x, y = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3))
    worst = _check_inputs(rng, T.add, x, y)
    worst = max(worst, _check_inputs(rng, T.subtract, x, y))
    worst = max(worst, _check_inputs(rng, T.multiply, x, y))
    worst = max(worst, _check_inputs(rng, T.add, x, rng.normal(size=3)))
    worst = max(worst, _check_inputs(rng, T.multiply, x, rng.normal(size=3)))
    worst = max(worst, _check_inputs(rng, lambda t: T.scale(t, -1.7), x))
    worst = max(worst, _check_inputs(rng, T.relu, _away_from_zero(rng, (2, 4, 3))))
    worst = max(worst, _check_inputs(rng, T.sigmoid, 3 * x))
    worst = max(worst, _check_inputs(rng, T.square, x))
    return worst


def _suite_reductions(seed):
    rng = make_rng(seed)
    x = rng.normal(size=(2, 5, 3))
    worst = finite_difference_gradcheck(T.sum_all, x)
    worst = max(worst, finite_difference_gradcheck(lambda t: T.scale(T.mean_all(t), 7.0), x))
    worst = max(worst, _check_inputs(rng, T.mean_over_nodes, x))
    worst = max(worst, _check_inputs(rng, lambda *ts: T.concat_channels(ts), x, rng.normal(size=(2, 5, 2))))
    return worst


def _suite_pooling(seed):
    rng = make_rng(seed)
    sk = build_default_skeleton()
    g0, g1 = sk.pool_maps[0].pairs, sk.pool_maps[1].pairs
    worst = _check_inputs(rng, lambda t: T.group_max(t, g0), _separated(rng, (2, 16, 3), g0))
    worst = max(worst, _check_inputs(rng, lambda t: T.group_max(t, g1), _separated(rng, (2, 8, 3), g1)))
    worst = max(worst, _check_inputs(rng, lambda t: T.duplicate_expand(t, g0), rng.normal(size=(2, 8, 3))))
    worst = max(worst, _check_inputs(rng, lambda t: T.duplicate_expand(t, g1), rng.normal(size=(4, 3))))
    return worst


def _separated(rng, shape, groups):
    """Random features where each pair's members differ by at least 0.1."""
    x = rng.normal(size=shape)
    for a, b in groups:
        gap = np.abs(x[..., a, :] - x[..., b, :])
        push = np.where(gap < 0.1, 0.1, 0.0) * np.where(x[..., a, :] >= x[..., b, :], 1.0, -1.0)
        x[..., a, :] += push
    return x


def _suite_masked_softmax(seed):
    rng = make_rng(seed)
    mask = build_default_skeleton().scales[0].support
    return _check_inputs(rng, lambda m: T.masked_softmax(m, mask), rng.normal(size=(16, 16)))


def _suite_batch_norm(seed):
    rng = make_rng(seed)
    x = rng.normal(size=(3, 4, 5)) * 2 + 1
    gain, bias = rng.normal(size=5), rng.normal(size=5)

    def make(t, g, b):
        return T.batch_norm(t, g, b, np.zeros(5), np.ones(5), "train")

    worst = _check_inputs(rng, make, x, gain, bias)
    rm, rv = rng.normal(size=5), rng.uniform(0.5, 2.0, size=5)
    infer = lambda t, g, b: T.batch_norm(t, g, b, rm, rv, "infer")
    return max(worst, _check_inputs(rng, infer, x, gain, bias))


def _suite_dropout(seed):
    rng = make_rng(seed)
    x = rng.normal(size=(2, 16, 8))
    # a fresh generator per call keeps the mask fixed across evaluations
    return _check_inputs(rng, lambda t: T.dropout(t, 0.25, "train", make_rng(seed, 7)), x)


def _suite_mse(seed):
    from .training import mse_loss

    rng = make_rng(seed)
    return _check_inputs(rng, lambda p, y: T.scale(mse_loss(p, y), 3.0),
                         rng.normal(size=(2, 16, 3)), rng.normal(size=(2, 16, 3)))


def _layer_check(seed, build, call, in_channels: int) -> float:
    rng = make_rng(seed)
    module = build(rng)
    x = rng.normal(size=(2, 16, in_channels))
    read = _projector(rng, call(module, Tensor(x)).shape)
    errs = parameter_gradcheck(lambda: read(call(module, Tensor(x))), dict(module.named_parameters()), rng,
                               entries_per_tensor=None)
    return max(max(errs.values()), finite_difference_gradcheck(lambda t: read(call(module, t)), x))


def _gconv_suite(kind):
    def suite(seed):
        scale = build_default_skeleton().scales[0]
        return _layer_check(seed, lambda rng: _randomized(L.GraphConv(kind, 3, 4, scale, rng), rng),
                            lambda m, x: m(x), 3)
    return suite


def _randomized(module, rng):
    """Replace zero-initialized parameters so every gradient path is exercised."""
    for _, p in module.named_parameters():
        p.data = rng.normal(size=p.shape) * 0.5
    return module


def _suite_se_block(seed):
    return _layer_check(seed, lambda rng: _randomized(L.SEBlock(8, 4, rng), rng), lambda m, x: m(x), 8)


def _suite_conv_block(seed):
    scale = build_default_skeleton().scales[0]
    return _layer_check(
        seed,
        lambda rng: _randomized(L.ConvBlock("preaggr", 3, 4, scale, rng, 0.25), rng),
        lambda m, x: m(x, "train", make_rng(seed, 7)),
        3,
    )


def _composite(model, seed, batch=2, entries_per_tensor=3) -> float:
    from .training import mse_loss

    rng = make_rng(seed, 11)
    x = rng.normal(size=(batch, 16, 2))
    y = Tensor(rng.normal(size=(batch, 16, 3)))
    # fixed dropout masks: the generator is rebuilt on every evaluation
    loss = lambda xt: mse_loss(model.forward(xt, "train", make_rng(seed, 7))[0], y)
    errs = parameter_gradcheck(lambda: loss(Tensor(x)), dict(model.named_parameters()), rng, entries_per_tensor)
    idx = [tuple(rng.integers(0, s) for s in x.shape) for _ in range(6)]
    return max(max(errs.values()), finite_difference_gradcheck(loss, x, indices=idx))


def _suite_hourglass(seed):
    from .training import mse_loss

    rng = make_rng(seed)
    sk = build_default_skeleton()
    hg = Hourglass("preaggr", (4, 6, 8), sk, rng)
    for _, p in hg.named_parameters():
        p.data = p.data + rng.normal(size=p.shape) * 0.1
    x = rng.normal(size=(2, 16, 4))
    y = Tensor(rng.normal(size=(2, 16, 4)))
    loss = lambda xt: mse_loss(hg(xt, "train", make_rng(seed, 7)), y)
    errs = parameter_gradcheck(lambda: loss(Tensor(x)), dict(hg.named_parameters()), rng, 3)
    return max(max(errs.values()), finite_difference_gradcheck(loss, x))


COMPOSITE_CONFIG = NetworkConfig(stacks=2, channels=16, se_ratio=4)


def _suite_graphsh(seed, config: NetworkConfig = COMPOSITE_CONFIG):
    return _composite(build_model(config, rng=seed), seed)


def _suite_seqres(seed):
    cfg = replace(COMPOSITE_CONFIG, architecture="seqres", seqres_depth=2, seqres_channels=8)
    return _composite(build_model(cfg, rng=seed), seed)


SUITES: dict[str, Callable[[int], float]] = {
    "matmul": _suite_matmul,
    "aggregate": _suite_aggregate,
    "node_matmul": _suite_node_matmul,
    "elementwise": _suite_elementwise,
    "reductions": _suite_reductions,
    "pooling": _suite_pooling,
    "masked_softmax": _suite_masked_softmax,
    "batch_norm": _suite_batch_norm,
    "dropout": _suite_dropout,
    "mse": _suite_mse,
    "gconv_vanilla": _gconv_suite("vanilla"),
    "gconv_semantic": _gconv_suite("semantic"),
    "gconv_preaggr": _gconv_suite("preaggr"),
    "se_block": _suite_se_block,
    "conv_block": _suite_conv_block,
    "hourglass": _suite_hourglass,
    "graphsh": _suite_graphsh,
    "seqres": _suite_seqres,
}


def run_suites(names: Iterable[str] | None = None, seeds: Iterable[int] = (0,)) -> dict[str, float]:
    """Max relative error per suite over ``seeds``; unknown names raise KeyError."""
    names = list(SUITES) if names is None else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown gradcheck suite(s): {', '.join(unknown)}")
    seeds = list(seeds)
    return {n: max(SUITES[n](s) for s in seeds) for n in names}
