"""Three-scale skeletal hierarchy (16 -> 8 -> 4 joints).

A skeleton is defined by joint names, the fine-scale edge list and two pair
maps. Coarse edges are the quotient of the finer edges under the pair map and
every scale carries the symmetric self-loop normalized adjacency
``D^-1/2 (A + I) D^-1/2``.

Skeleton config file (YAML or JSON)::

    joints: [Pelvis, RHip, ...]          # 16 names, index order
    edges: [[0, 1], [1, 2], ...]         # undirected fine-scale edges
    pool_maps:
      - [[0, 7], [8, 9], ...]            # 16 -> 8, one pair per coarse node
      - [[0, 2], [1, 5], ...]            # 8 -> 4, indices of 8-node scale
    coarse_edges:                        # optional; checked against the quotient
      - [[0, 2], ...]                    # 8-node edges
      - [[0, 2], ...]                    # 4-node edges
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .errors import ValidationError

SCALE_SIZES = (16, 8, 4)

DEFAULT_JOINTS = (
    "Pelvis", "RHip", "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle", "Spine",
    "Thorax", "Head", "LShoulder", "LElbow", "LWrist", "RShoulder", "RElbow", "RWrist",
)
DEFAULT_EDGES = (
    (0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (5, 6), (0, 7), (7, 8),
    (8, 9), (8, 10), (10, 11), (11, 12), (8, 13), (13, 14), (14, 15),
)
# coarse nodes: lower-torso, upper-torso, hips, r-lower-leg, l-lower-leg, shoulders, l-arm, r-arm
DEFAULT_POOL_16_8 = ((0, 7), (8, 9), (1, 4), (2, 3), (5, 6), (10, 13), (11, 12), (14, 15))
# coarse nodes: pelvis-block, chest-block, legs, arms
DEFAULT_POOL_8_4 = ((0, 2), (1, 5), (3, 4), (6, 7))

Edge = tuple[int, int]


class SkeletonConfigError(ValidationError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid skeleton:\n  " + "\n  ".join(self.violations))


def _canon_edges(edges: Iterable[Sequence[int]]) -> tuple[Edge, ...]:
    return tuple(sorted({(min(a, b), max(a, b)) for a, b in ((int(e[0]), int(e[1])) for e in edges)}))


def normalize_adjacency(edges: Iterable[Sequence[int]], node_count: int) -> np.ndarray:
    """Symmetric self-loop normalization ``D^-1/2 (A + I) D^-1/2``."""
    A = np.eye(node_count)
    for a, b in edges:
        a, b = int(a), int(b)
        if not (0 <= a < node_count and 0 <= b < node_count):
            raise ValidationError(f"edge ({a}, {b}) out of range for {node_count} nodes")
        if a == b:
            raise ValidationError(f"self-loop ({a}, {b}) in edge list")
        A[a, b] = A[b, a] = 1.0
    d = 1.0 / np.sqrt(A.sum(axis=1))
    return A * d[:, None] * d[None, :]


def quotient_graph(edges_fine: Iterable[Sequence[int]], group_map: Sequence[Sequence[int]]) -> tuple[Edge, ...]:
    """Coarse edges: groups g != h are adjacent iff some fine edge crosses between them."""
    owner: dict[int, int] = {}
    for g, pair in enumerate(group_map):
        for i in pair:
            owner[int(i)] = g
    out = set()
    for a, b in edges_fine:
        g, h = owner[int(a)], owner[int(b)]
        if g != h:
            out.add((min(g, h), max(g, h)))
    return tuple(sorted(out))


@dataclass(frozen=True)
class GraphScale:
    node_count: int
    edges: tuple[Edge, ...]
    adjacency_normalized: np.ndarray

    @classmethod
    def from_edges(cls, edges: Iterable[Sequence[int]], node_count: int) -> "GraphScale":
        edges = _canon_edges(edges)
        adj = normalize_adjacency(edges, node_count)
        adj.flags.writeable = False
        return cls(node_count, edges, adj)

    @property
    def support(self) -> np.ndarray:
        """Boolean ``A + I``."""
        return self.adjacency_normalized > 0


@dataclass(frozen=True)
class GroupMap:
    pairs: tuple[Edge, ...]

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class SkeletonSpec:
    scales: tuple[GraphScale, GraphScale, GraphScale]
    pool_maps: tuple[GroupMap, GroupMap]
    joint_names: tuple[str, ...]

    @classmethod
    def from_definition(
        cls,
        joint_names: Sequence[str],
        edges: Iterable[Sequence[int]],
        pool_maps: Sequence[Sequence[Sequence[int]]],
        coarse_edges: Sequence[Iterable[Sequence[int]]] | None = None,
    ) -> "SkeletonSpec":
        problems = check_definition(joint_names, edges, pool_maps)
        if coarse_edges is not None and len(coarse_edges) != 2:
            problems.append(f"expected 2 coarse edge lists, got {len(coarse_edges)}")
        if problems:
            raise SkeletonConfigError(problems)
        maps = tuple(GroupMap(tuple((int(a), int(b)) for a, b in m)) for m in pool_maps)
        fine = GraphScale.from_edges(edges, len(joint_names))
        scales = [fine]
        for i, gm in enumerate(maps):
            implied = quotient_graph(scales[-1].edges, gm.pairs)
            given = implied if coarse_edges is None else coarse_edges[i]
            scales.append(GraphScale.from_edges(given, len(gm)))
        spec = cls(tuple(scales), maps, tuple(joint_names))
        problems = validate_skeleton(spec)
        if problems:
            raise SkeletonConfigError(problems)
        return spec

    @property
    def joint_count(self) -> int:
        return self.scales[0].node_count

    def to_dict(self) -> dict:
        return {
            "joints": list(self.joint_names),
            "edges": [list(e) for e in self.scales[0].edges],
            "pool_maps": [[list(p) for p in m.pairs] for m in self.pool_maps],
            "coarse_edges": [[list(e) for e in s.edges] for s in self.scales[1:]],
        }

    def hash(self) -> bytes:
        """SHA-256 over the canonical JSON definition."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


def build_default_skeleton() -> SkeletonSpec:
    return SkeletonSpec.from_definition(DEFAULT_JOINTS, DEFAULT_EDGES, (DEFAULT_POOL_16_8, DEFAULT_POOL_8_4))


def _check_pairing(pairs, fine_count: int, label: str) -> list[str]:
    out = []
    flat = [int(i) for p in pairs for i in p]
    if any(len(p) != 2 for p in pairs):
        out.append(f"{label}: every group must be a pair")
    if len(pairs) * 2 != fine_count:
        out.append(f"{label}: {len(pairs)} groups for {fine_count} fine nodes (expected {fine_count // 2})")
    if len(set(flat)) != len(flat):
        dup = sorted({i for i in flat if flat.count(i) > 1})
        out.append(f"{label}: non-disjoint groups (repeated indices {dup})")
    bad = sorted(i for i in set(flat) if not 0 <= i < fine_count)
    if bad:
        out.append(f"{label}: indices {bad} out of range 0..{fine_count - 1}")
    missing = sorted(set(range(fine_count)) - set(flat))
    if missing:
        out.append(f"{label}: incomplete coverage (nodes {missing} in no group)")
    return out


def _check_edges(edges, n: int, label: str) -> list[str]:
    out = []
    seen = set()
    for e in edges:
        if len(e) != 2:
            out.append(f"{label}: edge {list(e)} is not a pair")
            continue
        a, b = int(e[0]), int(e[1])
        if a == b:
            out.append(f"{label}: self-loop ({a}, {b})")
        if not (0 <= a < n and 0 <= b < n):
            out.append(f"{label}: edge ({a}, {b}) out of range 0..{n - 1}")
        key = (min(a, b), max(a, b))
        if key in seen:
            out.append(f"{label}: duplicate edge {key}")
        seen.add(key)
    return out


def check_definition(joint_names, edges, pool_maps) -> list[str]:
    """Violations in a raw skeleton definition, before any derived structure is built."""
    edges = [tuple(e) for e in edges]
    out = []
    if len(joint_names) != SCALE_SIZES[0]:
        out.append(f"expected {SCALE_SIZES[0]} joints, got {len(joint_names)}")
    out += _check_edges(edges, len(joint_names), "scale 0")
    if len(pool_maps) != 2:
        out.append(f"expected 2 pool maps, got {len(pool_maps)}")
        return out
    fine = len(joint_names)
    for i, m in enumerate(pool_maps):
        out += _check_pairing([tuple(p) for p in m], fine, f"pool map {i}")
        fine = len(m)
    return out


def validate_skeleton(spec: SkeletonSpec) -> list[str]:
    """Every violated invariant of ``spec``; an empty list means valid."""
    out = []
    sizes = tuple(s.node_count for s in spec.scales)
    if sizes != SCALE_SIZES:
        out.append(f"scale node counts {sizes}, expected {SCALE_SIZES}")
    if len(spec.joint_names) != spec.scales[0].node_count:
        out.append(f"{len(spec.joint_names)} joint names for {spec.scales[0].node_count} joints")
    for i, s in enumerate(spec.scales):
        out += _check_edges(s.edges, s.node_count, f"scale {i}")
        A = s.adjacency_normalized
        if A.shape != (s.node_count, s.node_count):
            out.append(f"scale {i}: adjacency shape {A.shape}")
            continue
        if not np.array_equal(A, A.T):
            out.append(f"scale {i}: adjacency not symmetric")
        try:
            expected = normalize_adjacency(s.edges, s.node_count)
        except ValidationError:
            continue
        if not np.array_equal(A, expected):
            out.append(f"scale {i}: adjacency is not the self-loop normalization of its edges")
    for i, gm in enumerate(spec.pool_maps):
        fine, coarse = spec.scales[i], spec.scales[i + 1]
        pair_problems = _check_pairing(gm.pairs, fine.node_count, f"pool map {i}")
        out += pair_problems
        if len(gm) != coarse.node_count:
            out.append(f"pool map {i}: {len(gm)} groups but coarse scale has {coarse.node_count} nodes")
        if pair_problems:
            continue
        implied = set(quotient_graph(fine.edges, gm.pairs))
        have = set(coarse.edges)
        for e in sorted(have - implied):
            out.append(f"scale {i + 1}: edge {e} not implied by the quotient of scale {i}")
        for e in sorted(implied - have):
            out.append(f"scale {i + 1}: quotient edge {e} missing")
    return out


def block_partition(spec: SkeletonSpec) -> list[set[int]]:
    """Fine joints grouped by their coarsest-scale node."""
    first, second = spec.pool_maps
    return [set(first.pairs[a]) | set(first.pairs[b]) for a, b in second.pairs]


def is_connected(scale: GraphScale) -> bool:
    parent = list(range(scale.node_count))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in scale.edges:
        parent[find(a)] = find(b)
    return len({find(i) for i in range(scale.node_count)}) == 1


def load_skeleton(path: str | Path) -> SkeletonSpec:
    """Read a skeleton config file; raises :class:`SkeletonConfigError` listing all violations."""
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise SkeletonConfigError(["skeleton file must be a mapping"])
    missing = [k for k in ("joints", "edges", "pool_maps") if k not in raw]
    if missing:
        raise SkeletonConfigError([f"missing key {k!r}" for k in missing])
    return SkeletonSpec.from_definition(raw["joints"], raw["edges"], raw["pool_maps"], raw.get("coarse_edges"))


def dump_skeleton(spec: SkeletonSpec, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(spec.to_dict(), default_flow_style=None, sort_keys=False))
