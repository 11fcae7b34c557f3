"""Graph hourglass: encoder over the 16/8/4 joint scales and decoder back up.

Dataflow for widths ``(C, C_mid, C_low)`` with the default ``widen="pre_pool"``
(each encoder block widens before pooling, so features entering the 16-, 8-
and 4-joint scales carry C, C_mid and C_low channels)::

    e1 = block@16(x)          C     -> C_mid
    e2 = block@8(pool(e1))    C_mid -> C_low
    m  = block@4(pool(e2))    C_low -> C_low
    d2 = block@8(unpool(m) + e2)     C_low -> C_mid
    y  = block@16(unpool(d2) + e1)   C_mid -> C

With ``widen="post_pool"`` the encoder widens after pooling instead
(C -> C at 16, C -> C_mid at 8, C_mid -> C_low at 4) and the skips carry
node-wise linear adapters to match the decoder width.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .layers import ConvBlock, Module, NodeLinear
from .skeleton import SkeletonSpec
from .tensor import Tensor


def _stack(kind, c_in, c_out, scale, rng, dropout_p, count) -> list[ConvBlock]:
    blocks = [ConvBlock(kind, c_in, c_out, scale, rng, dropout_p)]
    blocks += [ConvBlock(kind, c_out, c_out, scale, rng, dropout_p) for _ in range(count - 1)]
    return blocks


class Hourglass(Module):
    def __init__(
        self,
        conv_kind: str,
        channels: tuple[int, int, int],
        skeleton: SkeletonSpec,
        rng: np.random.Generator,
        dropout_p: float = 0.25,
        blocks_per_scale: int = 1,
        widen: str = "pre_pool",
        pooling: bool = True,
    ):
        C, Cm, Cl = channels
        self.channels = tuple(channels)
        self.pooling = pooling
        self.groups = [gm.pairs for gm in skeleton.pool_maps]
        s16 = skeleton.scales[0]
        s8, s4 = (skeleton.scales[1], skeleton.scales[2]) if pooling else (s16, s16)
        n = blocks_per_scale
        if widen == "pre_pool":
            widths = [(C, Cm), (Cm, Cl), (Cl, Cl), (Cl, Cm), (Cm, C)]
        else:
            widths = [(C, C), (C, Cm), (Cm, Cl), (Cl, Cm), (Cm, C)]
        self.down16 = _stack(conv_kind, *widths[0], s16, rng, dropout_p, n)
        self.down8 = _stack(conv_kind, *widths[1], s8, rng, dropout_p, n)
        self.low4 = _stack(conv_kind, *widths[2], s4, rng, dropout_p, n)
        self.up8 = _stack(conv_kind, *widths[3], s8, rng, dropout_p, n)
        self.up16 = _stack(conv_kind, *widths[4], s16, rng, dropout_p, n)
        # skip widths vs the unpooled decoder input widths
        e2_w, u2_w = widths[1][1], widths[2][1]
        e1_w, u1_w = widths[0][1], widths[3][1]
        if e2_w != u2_w:
            self.skip8 = NodeLinear(e2_w, u2_w, rng)
        if e1_w != u1_w:
            self.skip16 = NodeLinear(e1_w, u1_w, rng)
        self.node_counts = (s16.node_count, s8.node_count, s4.node_count)

    def _pool(self, x: Tensor, level: int) -> Tensor:
        return T.group_max(x, self.groups[level]) if self.pooling else x

    def _unpool(self, x: Tensor, level: int) -> Tensor:
        return T.duplicate_expand(x, self.groups[level]) if self.pooling else x

    def _skip(self, name: str, e: Tensor) -> Tensor:
        adapter = getattr(self, name, None)
        return e if adapter is None else adapter(e)

    def __call__(self, x: Tensor, mode: str, rng: np.random.Generator | None = None,
                 trace: list | None = None) -> Tensor:
        return hourglass_forward(x, self, mode, rng, trace)


def _run(blocks, x, mode, rng):
    for b in blocks:
        x = b(x, mode, rng)
    return x


def hourglass_forward(x: Tensor, hg: Hourglass, mode: str, rng: np.random.Generator | None = None,
                      trace: list | None = None) -> Tensor:
    """Run one hourglass; ``trace`` (if given) receives ``(stage, node_count, channels)`` tuples."""
    K = hg.node_counts[0]
    if x.ndim != 3 or x.shape[1] != K or x.shape[2] != hg.channels[0]:
        raise ShapeError(f"hourglass input: expected [B, {K}, {hg.channels[0]}], got {x.shape}")

    def mark(stage, t):
        if trace is not None:
            trace.append((stage, t.shape[1], t.shape[2]))
        return t

    def expect(stage, t, nodes):
        if t.shape[1] != nodes:
            raise ShapeError(f"hourglass stage {stage}: expected {nodes} nodes, got {t.shape}")
        return mark(stage, t)

    mark("input", x)
    e1 = expect("down16", _run(hg.down16, x, mode, rng), hg.node_counts[0])
    e2 = expect("down8", _run(hg.down8, hg._pool(e1, 0), mode, rng), hg.node_counts[1])
    m = expect("low4", _run(hg.low4, hg._pool(e2, 1), mode, rng), hg.node_counts[2])
    u2 = T.add(hg._unpool(m, 1), hg._skip("skip8", e2))
    d2 = expect("up8", _run(hg.up8, u2, mode, rng), hg.node_counts[1])
    u1 = T.add(hg._unpool(d2, 0), hg._skip("skip16", e1))
    out = expect("up16", _run(hg.up16, u1, mode, rng), hg.node_counts[0])
    if out.shape != x.shape:
        raise ShapeError(f"hourglass output {out.shape} differs from input {x.shape}")
    return out


def hourglass_init(conv_kind: str, channels: tuple[int, int, int], skeleton: SkeletonSpec,
                   rng: np.random.Generator, **kwargs) -> Hourglass:
    return Hourglass(conv_kind, channels, skeleton, rng, **kwargs)
