"""GraphSH and SeqRes networks, parameter counting and the model file format.

Model file (little-endian)::

    b"GSHM" | u16 version
    u32 n | n bytes   network config, canonical JSON
    u32 n | n bytes   skeleton hash (SHA-256)
    u32 tensor_count
      per tensor: u16 n | name | u8 is_buffer | u8 ndim | ndim x u32 | f64 data
    u32 section_count
      per section: 4-byte tag | u64 n | n bytes
Tensors are written in declaration order (parameters, then buffers).
Checkpoints add sections such as ``NORM`` (normalizer) and ``ADAM``
(optimizer state).
"""

from __future__ import annotations

import json
import struct
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import NetworkConfig, network_config_from_dict, network_config_to_dict
from .errors import (
    BadMagicError,
    ConfigError,
    CorruptionError,
    ShapeError,
    SkeletonMismatchError,
    VersionMismatchError,
)
from .hourglass import Hourglass
from .layers import BatchNorm, ConvBlock, GraphConv, Module, NodeLinear, SEBlock
from .rng import STREAM_INIT, make_rng
from .skeleton import SkeletonSpec, build_default_skeleton
from .tensor import Tensor

MODEL_MAGIC = b"GSHM"
MODEL_VERSION = 1


class PreLayer(Module):
    """Input graph conv (2 -> C), optionally followed by BN + ReLU."""

    def __init__(self, kind, channels, skeleton, rng, bn_relu=False):
        self.conv = GraphConv(kind, 2, channels, skeleton.scales[0], rng)
        if bn_relu:
            self.bn = BatchNorm(channels)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        h = self.conv(x)
        if hasattr(self, "bn"):
            h = T.relu(self.bn(h, mode))
        return h


class PoseModel(Module):
    config: NetworkConfig
    skeleton: SkeletonSpec

    def forward(self, x2d: Tensor, mode: str = "infer", rng=None, trace=None):
        raise NotImplementedError

    def _check_input(self, x2d: Tensor) -> None:
        K = self.skeleton.joint_count
        if x2d.ndim != 3 or x2d.shape[1:] != (K, 2):
            raise ShapeError(f"expected input [B, {K}, 2], got {x2d.shape}")

    def predict(self, x2d: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Infer-mode predictions for a [N, K, 2] array (no graph is retained)."""
        x2d = np.asarray(x2d, dtype=np.float64)
        out = [
            self.forward(Tensor(x2d[i:i + batch_size]), "infer")[0].data
            for i in range(0, len(x2d), batch_size)
        ]
        return np.concatenate(out) if out else np.zeros((0, self.skeleton.joint_count, 3))


class GraphSH(PoseModel):
    def __init__(self, config: NetworkConfig, skeleton: SkeletonSpec, rng: np.random.Generator):
        self.config, self.skeleton = config, skeleton
        kind, C, n = config.conv_kind, config.channels, config.stacks
        self.pre = PreLayer(kind, C, skeleton, rng, config.pre_bn_relu)
        self.hourglasses = [
            Hourglass(kind, config.ladder, skeleton, rng, config.dropout_p,
                      config.blocks_per_scale, config.widen, config.pooling)
            for _ in range(n)
        ]
        if config.multi_level != "none":
            self.heads = [NodeLinear(C, C // n, rng) for _ in range(n)]
        if config.multi_level == "se":
            self.se = SEBlock(C, config.se_ratio, rng)
        self.output_head = NodeLinear(C, 3, rng)

    def forward(self, x2d: Tensor, mode: str = "infer", rng=None, trace=None):
        """Return ``(pred3d [B, K, 3], intermediate features)``."""
        self._check_input(x2d)
        h = self.pre(x2d, mode)
        intermediates = []
        for i, hg in enumerate(self.hourglasses):
            h = hg(h, mode, rng, trace)
            if self.config.multi_level != "none":
                intermediates.append(self.heads[i](h))
        if self.config.multi_level == "none":
            feat = h
        else:
            feat = T.concat_channels(intermediates)
            if self.config.multi_level == "se":
                feat = self.se(feat)
        return self.output_head(feat), intermediates


class ResidualBlock(Module):
    def __init__(self, kind, channels, scale, rng, dropout_p):
        self.first = ConvBlock(kind, channels, channels, scale, rng, dropout_p)
        self.second = ConvBlock(kind, channels, channels, scale, rng, dropout_p)

    def __call__(self, x: Tensor, mode: str, rng=None) -> Tensor:
        return T.add(x, self.second(self.first(x, mode, rng), mode, rng))


class SeqRes(PoseModel):
    """Sequential residual graph-conv baseline at a single (16-joint) scale."""

    def __init__(self, config: NetworkConfig, skeleton: SkeletonSpec, rng: np.random.Generator):
        self.config, self.skeleton = config, skeleton
        kind, W = config.conv_kind, config.seqres_channels
        self.pre = PreLayer(kind, W, skeleton, rng, config.pre_bn_relu)
        self.blocks = [
            ResidualBlock(kind, W, skeleton.scales[0], rng, config.dropout_p)
            for _ in range(config.seqres_depth)
        ]
        self.output_head = NodeLinear(W, 3, rng)

    def forward(self, x2d: Tensor, mode: str = "infer", rng=None, trace=None):
        self._check_input(x2d)
        h = self.pre(x2d, mode)
        for block in self.blocks:
            h = block(h, mode, rng)
            if trace is not None:
                trace.append(("resblock", h.shape[1], h.shape[2]))
        return self.output_head(h), []


def build_model(config: NetworkConfig, skeleton: SkeletonSpec | None = None,
                rng: np.random.Generator | int | None = 0) -> PoseModel:
    skeleton = skeleton or build_default_skeleton()
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(0 if rng is None else rng, STREAM_INIT)
    cls = GraphSH if config.architecture == "graphsh" else SeqRes
    return cls(config, skeleton, rng)


def graphsh_init(config: NetworkConfig, skeleton: SkeletonSpec, rng) -> GraphSH:
    if config.architecture != "graphsh":
        raise ConfigError("graphsh_init needs architecture='graphsh'")
    return build_model(config, skeleton, rng)


def graphsh_forward(model: GraphSH, x2d: Tensor, mode: str = "infer", rng=None):
    return model.forward(x2d, mode, rng)


def seqres_build_and_forward(config: NetworkConfig, skeleton: SkeletonSpec, rng, x2d: Tensor,
                             mode: str = "infer", forward_rng=None) -> Tensor:
    if config.architecture != "seqres":
        raise ConfigError("seqres_build_and_forward needs architecture='seqres'")
    return build_model(config, skeleton, rng).forward(x2d, mode, forward_rng)[0]


def count_params(model: Module) -> int:
    return sum(p.size for _, p in model.named_parameters())


# ---------------------------------------------------------------------------
# serialization


def _pack_bytes(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def serialize_model(model: PoseModel, sections: dict[str, bytes] | None = None) -> bytes:
    cfg = json.dumps(network_config_to_dict(model.config), sort_keys=True, separators=(",", ":")).encode()
    out = [MODEL_MAGIC, struct.pack("<H", MODEL_VERSION), _pack_bytes(cfg), _pack_bytes(model.skeleton.hash())]
    entries = [(n, 0, p.data) for n, p in model.named_parameters()]
    entries += [(n, 1, b) for n, b in model.named_buffers()]
    out.append(struct.pack("<I", len(entries)))
    for name, is_buf, arr in entries:
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", is_buf, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    sections = sections or {}
    out.append(struct.pack("<I", len(sections)))
    for tag, payload in sections.items():
        tb = tag.encode()
        if len(tb) != 4:
            raise ValueError(f"section tag must be 4 bytes, got {tag!r}")
        out.append(tb + struct.pack("<Q", len(payload)) + payload)
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.blob):
            raise CorruptionError(f"truncated stream: need {n} bytes at offset {self.pos}, have {len(self.blob) - self.pos}")
        b = self.blob[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def chunk(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)


def load_model(blob: bytes, skeleton: SkeletonSpec | None = None) -> tuple[PoseModel, dict[str, bytes]]:
    """Parse a model/checkpoint stream; returns the model and its extra sections."""
    r = _Reader(blob)
    if r.take(4) != MODEL_MAGIC:
        raise BadMagicError("not a model file (bad magic)")
    (version,) = r.unpack("<H")
    if version != MODEL_VERSION:
        raise VersionMismatchError(f"model format version {version}, expected {MODEL_VERSION}")
    try:
        cfg = network_config_from_dict(json.loads(r.chunk().decode()))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"unreadable config section: {exc}") from None
    skel_hash = r.chunk()
    skeleton = skeleton or build_default_skeleton()
    if skel_hash != skeleton.hash():
        raise SkeletonMismatchError("model was saved with a different skeleton configuration")
    model = build_model(cfg, skeleton, 0)
    expected = [(n, 0, p) for n, p in model.named_parameters()]
    expected += [(n, 1, b) for n, b in model.named_buffers()]
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise CorruptionError(f"{count} tensors in stream, model has {len(expected)}")
    for name, is_buf, target in expected:
        (nlen,) = r.unpack("<H")
        got_name = r.take(nlen).decode(errors="replace")
        flag, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        shape_expected = target.shape if is_buf else target.data.shape
        if got_name != name or flag != is_buf or tuple(shape) != shape_expected:
            raise CorruptionError(f"tensor {got_name!r} {shape} does not match model tensor {name!r} {shape_expected}")
        data = np.frombuffer(r.take(8 * int(np.prod(shape))), dtype="<f8").astype(np.float64).reshape(shape)
        if is_buf:
            target[...] = data
        else:
            target.data = data
    (nsec,) = r.unpack("<I")
    sections = {}
    for _ in range(nsec):
        tag = r.take(4).decode(errors="replace")
        (n,) = r.unpack("<Q")
        sections[tag] = r.take(n)
    if r.pos != len(blob):
        raise CorruptionError(f"{len(blob) - r.pos} trailing bytes after model stream")
    return model, sections


def deserialize_model(blob: bytes, skeleton: SkeletonSpec | None = None) -> PoseModel:
    return load_model(blob, skeleton)[0]


def parameter_snapshot(model: Module) -> list[np.ndarray]:
    return [p.data.copy() for _, p in model.named_parameters()]


def matched_seqres_channels(target_params: int, config: NetworkConfig,
                            skeleton: SkeletonSpec | None = None,
                            candidates: Sequence[int] = range(8, 257)) -> int:
    """SeqRes width whose parameter count is closest to ``target_params``."""
    from dataclasses import replace

    skeleton = skeleton or build_default_skeleton()
    best, best_gap = None, None
    for w in candidates:
        cfg = replace(config, architecture="seqres", seqres_channels=int(w))
        gap = abs(count_params(build_model(cfg, skeleton, 0)) - target_params)
        if best_gap is None or gap < best_gap:
            best, best_gap = int(w), gap
    return best
