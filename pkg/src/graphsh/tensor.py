"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the pose-lifting networks need are provided. Each
operation computes its forward value with numpy and records an
:class:`OpRecord` holding its inputs, any saved activations (argmax indices,
dropout masks, normalized activations) and a closure mapping the upstream
gradient to per-input gradients. :func:`backward` walks the recorded graph
once in reverse topological order.

Broadcasting is deliberately narrow: in ``add``/``subtract``/``multiply`` the
second operand may be broadcast against the first (right-aligned, size-1 or
missing axes), never the other way round.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, InsufficientStatisticsError, ShapeError, ValidationError

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(frozen=True)
class OpRecord:
    kind: str
    inputs: tuple["Tensor", ...]
    backward: BackwardFn
    saved: dict = field(default_factory=dict)


class Tensor:
    """A node in a differentiable computation graph.

    Leaves (parameters and inputs) have ``op is None``. Tensors hash by
    identity so they can key a :class:`GradientMap`.
    """

    __slots__ = ("data", "requires_grad", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, op: OpRecord | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if op is None else data
        if arr.ndim == 0 and op is None:
            arr = arr.reshape(())
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        kind = "leaf" if self.op is None else self.op.kind
        return f"Tensor(shape={self.shape}, {kind}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return subtract(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, kind: str, inputs: tuple[Tensor, ...], bwd: BackwardFn, **saved) -> Tensor:
    data = np.asarray(data, dtype=DTYPE)
    requires = any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=requires, op=OpRecord(kind, inputs, bwd, saved))


class GradientMap(dict):
    """Leaf tensor -> gradient array. Missing leaves read as zeros."""

    def __missing__(self, key: Tensor) -> np.ndarray:
        return np.zeros_like(key.data)


def backward(root: Tensor) -> GradientMap:
    """Gradients of scalar ``root`` with respect to every ``requires_grad`` leaf."""
    if root.size != 1:
        raise ContractError(f"backward() requires a scalar root, got shape {root.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.op is not None:
            for parent in node.op.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    out = GradientMap()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op is None:
            if node.requires_grad:
                out[node] = g
            continue
        for parent, pg in zip(node.op.inputs, node.op.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ContractError(
                    f"{node.op.kind} produced gradient of shape {pg.shape} for input {parent.shape}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def bwd(g):
        return g @ B.T, A.T @ g

    return _result(A @ B, "matmul", (a, b), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {x.shape}")

    def bwd(g):
        return (g.T,)

    return _result(x.data.T.copy(), "transpose", (x,), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    src = x.shape

    def bwd(g):
        return (g.reshape(src),)

    return _result(x.data.reshape(shape), "reshape", (x,), bwd)


def aggregate(adj: Tensor, x: Tensor) -> Tensor:
    """Neighbourhood aggregation ``adj @ x[b]`` for every batch item; x is [..., K, C]."""
    K = adj.shape[0]
    if adj.ndim != 2 or adj.shape[1] != K or x.ndim < 2 or x.shape[-2] != K:
        raise ShapeError(f"aggregate shape mismatch: adjacency {adj.shape}, features {x.shape}")
    A, X = adj.data, x.data

    def bwd(g):
        gx = A.T @ g
        ga = None
        if adj.requires_grad:
            ga = np.tensordot(g, X, axes=(tuple(i for i in range(g.ndim) if i != g.ndim - 2),) * 2)
        return ga, gx

    return _result(A @ X, "aggregate", (adj, x), bwd)


def node_matmul(x: Tensor, w: Tensor) -> Tensor:
    """Per-node linear maps: ``out[b, k] = x[b, k] @ w[k]``; x is [B, K, Cin], w is [K, Cin, Cout]."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[0] or x.shape[2] != w.shape[1]:
        raise ShapeError(f"node_matmul shape mismatch: features {x.shape}, weights {w.shape}")
    X, W = x.data, w.data
    # [K, B, Cin] @ [K, Cin, Cout] -> [K, B, Cout]
    Xk = X.transpose(1, 0, 2)

    def bwd(g):
        gk = g.transpose(1, 0, 2)
        gx = (gk @ W.transpose(0, 2, 1)).transpose(1, 0, 2)
        gw = Xk.transpose(0, 2, 1) @ gk
        return gx, gw

    return _result((Xk @ W).transpose(1, 0, 2), "node_matmul", (x, w), bwd)


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim > a.ndim:
        raise ShapeError(f"{kind}: cannot broadcast {b.shape} onto {a.shape}")
    for da, db in zip(a.shape[::-1], b.shape[::-1]):
        if db != da and db != 1:
            raise ShapeError(f"{kind}: cannot broadcast {b.shape} onto {a.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    bshape = b.shape

    def bwd(g):
        return g, _unbroadcast(g, bshape)

    return _result(a.data + b.data, "add", (a, b), bwd)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "subtract")
    bshape = b.shape

    def bwd(g):
        return g, -_unbroadcast(g, bshape)

    return _result(a.data - b.data, "subtract", (a, b), bwd)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "multiply")
    A, B = a.data, b.data

    def bwd(g):
        return g * B, _unbroadcast(g * A, B.shape)

    return _result(A * B, "multiply", (a, b), bwd)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def bwd(g):
        return (g * factor,)

    return _result(x.data * factor, "scale", (x,), bwd, factor=factor)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), "relu", (x,), bwd, mask=mask)


def sigmoid(x: Tensor) -> Tensor:
    X = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(X))
    s = np.where(X >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _result(s, "sigmoid", (x,), bwd)


def square(x: Tensor) -> Tensor:
    X = x.data

    def bwd(g):
        return (2.0 * g * X,)

    return _result(X * X, "square", (x,), bwd)


_ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "add": add,
    "multiply": multiply,
    "subtract": subtract,
    "square": square,
}


def elementwise(kind: str, *inputs: Tensor, factor: float | None = None) -> Tensor:
    if kind == "scale":
        if len(inputs) != 1 or factor is None:
            raise ContractError("scale takes one input and a factor")
        return scale(inputs[0], factor)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# reductions and structure


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum()), "sum", (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size

    def bwd(g):
        return (np.full(shape, float(g) / n),)

    return _result(np.asarray(x.data.mean()), "mean", (x,), bwd)


def mean_over_nodes(f: Tensor) -> Tensor:
    """Average over the node axis: [K, C] -> [C], [B, K, C] -> [B, C]."""
    if f.ndim < 2:
        raise ShapeError(f"mean_over_nodes needs [..., K, C], got {f.shape}")
    shape = f.shape
    K = shape[-2]

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, -2) / K, shape).copy(),)

    return _result(f.data.mean(axis=-2), "mean_over_nodes", (f,), bwd)


def concat_channels(features: Sequence[Tensor]) -> Tensor:
    features = tuple(features)
    if not features:
        raise ShapeError("concat_channels needs at least one input")
    lead = features[0].shape[:-1]
    for t in features:
        if t.shape[:-1] != lead:
            raise ShapeError(
                f"concat_channels: node/batch axes differ: {[t.shape for t in features]}"
            )
    splits = np.cumsum([t.shape[-1] for t in features])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=-1))

    out = np.concatenate([t.data for t in features], axis=-1)
    return _result(out, "concat_channels", features, bwd)


def _check_groups(groups: Sequence[tuple[int, int]], K: int) -> np.ndarray:
    arr = np.asarray(groups, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValidationError(f"groups must be index pairs, got shape {arr.shape}")
    if arr.shape[0] * 2 != K or sorted(arr.ravel().tolist()) != list(range(K)):
        raise ValidationError(f"groups do not partition node indices 0..{K - 1} into pairs")
    return arr


def group_max(x: Tensor, groups: Sequence[tuple[int, int]]) -> Tensor:
    """Pairwise max over the node axis; ties route the gradient to the lower index."""
    if x.ndim < 2:
        raise ShapeError(f"group_max needs [..., K, C], got {x.shape}")
    K = x.shape[-2]
    pairs = _check_groups(groups, K)
    lo = pairs.min(axis=1)
    hi = pairs.max(axis=1)
    a = x.data[..., lo, :]
    b = x.data[..., hi, :]
    take_hi = b > a
    argmax = np.where(take_hi, hi[:, None], lo[:, None])
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape)
        gx[..., lo, :] = np.where(take_hi, 0.0, g)
        gx[..., hi, :] = np.where(take_hi, g, 0.0)
        return (gx,)

    return _result(np.where(take_hi, b, a), "group_max", (x,), bwd, argmax=argmax)


def duplicate_expand(y: Tensor, groups: Sequence[tuple[int, int]]) -> Tensor:
    """Copy each coarse row to both of its fine member rows."""
    pairs = np.asarray(groups, dtype=np.int64)
    if y.ndim < 2 or pairs.ndim != 2 or pairs.shape[0] != y.shape[-2]:
        raise ValidationError(
            f"duplicate_expand: {pairs.shape[0] if pairs.ndim == 2 else '?'} groups "
            f"for {y.shape[-2] if y.ndim >= 2 else '?'} coarse rows"
        )
    K = 2 * pairs.shape[0]
    _check_groups(pairs, K)
    # fine node -> coarse node
    owner = np.empty(K, dtype=np.int64)
    owner[pairs[:, 0]] = np.arange(pairs.shape[0])
    owner[pairs[:, 1]] = np.arange(pairs.shape[0])

    def bwd(g):
        return (g[..., pairs[:, 0], :] + g[..., pairs[:, 1], :],)

    return _result(y.data[..., owner, :], "duplicate_expand", (y,), bwd)


def masked_softmax(m: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax of ``m`` over the support of boolean ``mask``; zero elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    if m.ndim != 2 or mask.shape != m.shape:
        raise ShapeError(f"masked_softmax: logits {m.shape} vs mask {mask.shape}")
    if not mask.any(axis=1).all():
        raise ValidationError("masked_softmax: a mask row has no support")
    logits = np.where(mask, m.data, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(logits), 0.0)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, "masked_softmax", (m,), bwd)


# ---------------------------------------------------------------------------
# normalization and regularization


def batch_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over every axis except the last.

    In ``train`` mode the running statistics arrays are updated in place
    (unbiased variance, PyTorch convention).
    """
    C = x.shape[-1]
    if gain.shape != (C,) or bias.shape != (C,):
        raise ShapeError(f"batch_norm: {C} channels but gain {gain.shape}, bias {bias.shape}")
    X = x.data
    axes = tuple(range(X.ndim - 1))
    n = X.size // C
    if mode == "train":
        if n < 2:
            raise InsufficientStatisticsError(
                f"batch_norm needs at least 2 values per channel in train mode, got {n}"
            )
        mu = X.mean(axis=axes)
        var = X.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    elif mode == "infer":
        mu, var = running_mean.copy(), running_var.copy()
    else:
        raise ContractError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu) * inv_std
    G = gain.data
    train = mode == "train"

    def bwd(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        dxhat = g * G
        if train:
            gx = inv_std / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            gx = dxhat * inv_std
        return gx, gg, gb

    return _result(xhat * G + bias.data, "batch_norm", (x, gain, bias), bwd, xhat=xhat, mode=mode)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "infer"):
        raise ContractError(f"unknown mode {mode!r}")
    if mode == "infer" or p == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= p
    mask = keep / (1.0 - p)

    def bwd(g):
        return (g * mask,)

    return _result(x.data * mask, "dropout", (x,), bwd, mask=keep)
