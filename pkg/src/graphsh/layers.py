"""Graph convolutions, node-wise linear maps, conv blocks and the SE block.

Functional forms (``gconv_*``, ``node_linear``, ``se_block``) take explicit
tensors; the :class:`Module` subclasses own initialized parameters and call
them. Parameters are registered implicitly: every ``requires_grad`` tensor
attribute, sub-module and list of sub-modules, in assignment order.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError, ValidationError
from .skeleton import GraphScale
from .tensor import Tensor

CONV_KINDS = ("vanilla", "semantic", "preaggr")


class Module:
    """Parameter/buffer registry by attribute order."""

    buffers: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if name in self.buffers:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """Shared ``x @ w (+ b)`` over the last axis of a [..., Cin] tensor."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input has {x.shape[-1]} channels, weight is {w.shape}")
    lead = x.shape[:-1]
    flat = T.reshape(x, (int(np.prod(lead)), x.shape[-1]))
    out = T.reshape(T.matmul(flat, w), (*lead, w.shape[1]))
    return out if b is None else T.add(out, b)


# ---------------------------------------------------------------------------
# functional layers


def gconv_vanilla(x: Tensor, adj: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    """``adj @ x @ w + b`` per batch item."""
    if x.ndim != 3 or adj.shape != (x.shape[1], x.shape[1]):
        raise ShapeError(f"gconv_vanilla: features {x.shape}, adjacency {adj.shape}")
    return _linear(T.aggregate(Tensor(adj), x), w, b)


def effective_adjacency(mask: np.ndarray, m: Tensor) -> Tensor:
    return T.masked_softmax(m, mask)


def gconv_semantic(x: Tensor, mask: np.ndarray, m: Tensor, w: Tensor, b: Tensor,
                   w_self: Tensor | None = None) -> Tensor:
    """Graph conv whose adjacency is the row softmax of learnable ``m`` over ``mask``.

    With ``w_self`` the diagonal of the effective adjacency is applied through
    its own weight (``eff_ii x_i W_self + sum_{j != i} eff_ij x_j W``); without
    it, or with ``w_self`` equal to ``w``, this is ``eff @ x @ w + b``.
    """
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 3 or mask.shape != (x.shape[1], x.shape[1]) or m.shape != mask.shape:
        raise ShapeError(f"gconv_semantic: features {x.shape}, mask {mask.shape}, logits {m.shape}")
    if not mask.any(axis=1).all():
        raise ValidationError("gconv_semantic: mask has a row with no support")
    eff = effective_adjacency(mask, m)
    if w_self is None:
        return _linear(T.aggregate(eff, x), w, b)
    eye = np.eye(mask.shape[0])
    neighbours = _linear(T.aggregate(T.multiply(eff, Tensor(1.0 - eye)), x), w, None)
    own = _linear(T.aggregate(T.multiply(eff, Tensor(eye)), x), w_self, None)
    return T.add(T.add(neighbours, own), b)


def gconv_preaggr(x: Tensor, adj: np.ndarray, w_neighbors: Tensor, w_self: Tensor, b: Tensor) -> Tensor:
    """Pre-aggregation graph conv with decoupled self connections.

    Each node's features are transformed by that node's own weights before
    aggregation: ``out_i = sum_{j != i} adj_ij x_j W^n_j + adj_ii x_i W^s_i + b``.
    """
    K = x.shape[1] if x.ndim == 3 else -1
    if w_neighbors.ndim != 3 or w_neighbors.shape[0] != K:
        raise ValidationError(
            f"gconv_preaggr: need {K} neighbour weight matrices, got shape {w_neighbors.shape}"
        )
    if w_self.shape != w_neighbors.shape:
        raise ValidationError(f"gconv_preaggr: self weights {w_self.shape} vs neighbour {w_neighbors.shape}")
    if adj.shape != (K, K):
        raise ShapeError(f"gconv_preaggr: adjacency {adj.shape} for {K} nodes")
    diag = np.diag(adj).copy()
    off = adj - np.diag(diag)
    m_nb = T.node_matmul(x, w_neighbors)
    m_self = T.node_matmul(x, w_self)
    out = T.add(T.aggregate(Tensor(off), m_nb), T.multiply(m_self, Tensor(diag[:, None])))
    return T.add(out, b)


def node_linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    return _linear(x, w, b)


def se_block(f: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Squeeze-and-excitation over channels of [B, K, C] (or [K, C]) features."""
    C = f.shape[-1]
    if w1.ndim != 2 or w1.shape[1] != C or w2.shape != (C, w1.shape[0]):
        raise ShapeError(f"se_block: features {f.shape}, W1 {w1.shape}, W2 {w2.shape}")
    z = T.mean_over_nodes(f)
    z2 = z if z.ndim == 2 else T.reshape(z, (1, C))
    h = T.relu(T.matmul(z2, T.transpose(w1)))
    s = T.sigmoid(T.matmul(h, T.transpose(w2)))
    s = T.reshape(s, (f.shape[0], 1, C) if f.ndim == 3 else (C,))
    return T.multiply(f, s)


# ---------------------------------------------------------------------------
# modules


class GraphConv(Module):
    def __init__(self, kind: str, in_channels: int, out_channels: int, scale: GraphScale, rng: np.random.Generator):
        if kind not in CONV_KINDS:
            raise ConfigError(f"unknown graph conv kind {kind!r}; expected one of {CONV_KINDS}")
        self.kind = kind
        self.in_channels, self.out_channels = in_channels, out_channels
        self.adj = scale.adjacency_normalized
        K = scale.node_count
        if kind == "preaggr":
            self.w_neighbors = glorot(rng, (K, in_channels, out_channels), in_channels, out_channels)
            self.w_self = glorot(rng, (K, in_channels, out_channels), in_channels, out_channels)
        else:
            self.w = glorot(rng, (in_channels, out_channels), in_channels, out_channels)
        if kind == "semantic":
            self.w_self = glorot(rng, (in_channels, out_channels), in_channels, out_channels)
            self.mask = scale.support
            self.m = zeros(K, K)
        self.b = zeros(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "vanilla":
            return gconv_vanilla(x, self.adj, self.w, self.b)
        if self.kind == "semantic":
            return gconv_semantic(x, self.mask, self.m, self.w, self.b, self.w_self)
        return gconv_preaggr(x, self.adj, self.w_neighbors, self.w_self, self.b)


class NodeLinear(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.w = glorot(rng, (in_channels, out_channels), in_channels, out_channels)
        self.b = zeros(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return node_linear(x, self.w, self.b)


class BatchNorm(Module):
    buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gain = Tensor(np.ones(channels), requires_grad=True)
        self.bias = zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return T.batch_norm(
            x, self.gain, self.bias, self.running_mean, self.running_var, mode, self.momentum, self.eps
        )


class ConvBlock(Module):
    """graph conv -> batch norm -> ReLU -> dropout."""

    def __init__(self, kind: str, in_channels: int, out_channels: int, scale: GraphScale,
                 rng: np.random.Generator, dropout_p: float = 0.0):
        if not 0.0 <= dropout_p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {dropout_p}")
        self.conv = GraphConv(kind, in_channels, out_channels, scale, rng)
        self.bn = BatchNorm(out_channels)
        self.dropout_p = dropout_p

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def __call__(self, x: Tensor, mode: str, rng: np.random.Generator | None = None) -> Tensor:
        return conv_block(x, self, mode, self.dropout_p, rng)


def conv_block(x: Tensor, block: ConvBlock, mode: str, dropout_p: float,
               rng: np.random.Generator | None) -> Tensor:
    if mode not in ("train", "infer"):
        raise ContractError(f"unknown mode {mode!r}")
    h = T.relu(block.bn(block.conv(x), mode))
    return T.dropout(h, dropout_p, mode, rng)


class SEBlock(Module):
    def __init__(self, channels: int, ratio: int, rng: np.random.Generator):
        if ratio < 1 or channels % ratio:
            raise ConfigError(f"SE block: {channels} channels not divisible by reduction ratio {ratio}")
        hidden = channels // ratio
        self.ratio = ratio
        self.w1 = glorot(rng, (hidden, channels), channels, hidden)
        self.w2 = glorot(rng, (channels, hidden), hidden, channels)

    def __call__(self, f: Tensor) -> Tensor:
        return se_block(f, self.w1, self.w2)
