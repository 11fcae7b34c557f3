"""Pose datasets: binary/CSV I/O, normalization, batching and a synthetic generator.

Dataset file (little-endian)::

    b"GSHP" | u16 version | u32 N | u32 K (=16) | u8 has_actions
    N records: K*2 f32 input (x, y per joint) | K*3 f32 target (mm)
               | u16 action id (only if has_actions)

Values are stored as float32, so a dataset held in float64 round-trips
bit-exactly once its values are float32-representable (anything that was
loaded from a file is).

CSV fixtures have a header row and one sample per row::

    action, u0, v0, ..., u15, v15, x0, y0, z0, ..., x15, y15, z15

``action`` is left empty when the dataset has no action labels.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    CorruptionError,
    FormatError,
    NonFiniteDataError,
    ValidationError,
    VersionMismatchError,
)
from .rng import STREAM_SHUFFLE, STREAM_SYNTH, make_rng
from .skeleton import DEFAULT_EDGES

JOINTS = 16
DATA_MAGIC = b"GSHP"
DATA_VERSION = 1
STD_FLOOR = 1e-8


class PoseSample(NamedTuple):
    input2d: np.ndarray
    target3d: np.ndarray
    action_id: int | None


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics in pixels."""

    fx: float = 1145.0
    fy: float = 1145.0
    cx: float = 512.0
    cy: float = 515.0

    def __post_init__(self):
        if self.fx == 0 or self.fy == 0 or not np.isfinite([self.fx, self.fy, self.cx, self.cy]).all():
            raise ConfigError(f"degenerate camera: {self}")

    def project(self, points: np.ndarray) -> np.ndarray:
        """[..., 3] camera-frame points (mm, z forward) -> [..., 2] pixels."""
        z = points[..., 2]
        return np.stack(
            [self.fx * points[..., 0] / z + self.cx, self.fy * points[..., 1] / z + self.cy], axis=-1
        )


@dataclass
class Normalizer:
    """Per-coordinate standardization statistics, fit on root-aligned training data."""

    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    def to_bytes(self) -> bytes:
        K = self.input_mean.shape[0]
        arrays = (self.input_mean, self.input_std, self.target_mean, self.target_std)
        return struct.pack("<I", K) + b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Normalizer":
        if len(blob) < 4:
            raise CorruptionError("normalizer section truncated")
        (K,) = struct.unpack_from("<I", blob)
        if len(blob) != 4 + 8 * K * 10:
            raise CorruptionError(f"normalizer section has {len(blob)} bytes, expected {4 + 80 * K}")
        flat = np.frombuffer(blob, dtype="<f8", offset=4).astype(np.float64)
        i2, i3 = K * 2, K * 3
        return cls(
            flat[:i2].reshape(K, 2), flat[i2:2 * i2].reshape(K, 2),
            flat[2 * i2:2 * i2 + i3].reshape(K, 3), flat[2 * i2 + i3:].reshape(K, 3),
        )


@dataclass
class PoseDataset:
    inputs: np.ndarray
    targets: np.ndarray
    actions: np.ndarray | None = None
    normalizer: Normalizer | None = None
    camera: Camera | None = None
    root_translation: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.size == 0 and self.targets.size == 0:
            self.inputs = self.inputs.reshape(0, JOINTS, 2)
            self.targets = self.targets.reshape(0, JOINTS, 3)
        n = len(self.inputs)
        if self.inputs.shape != (n, JOINTS, 2) or self.targets.shape != (n, JOINTS, 3):
            raise ValidationError(
                f"expected inputs [N, {JOINTS}, 2] and targets [N, {JOINTS}, 3], "
                f"got {self.inputs.shape} and {self.targets.shape}"
            )
        if not (np.isfinite(self.inputs).all() and np.isfinite(self.targets).all()):
            raise ValidationError("dataset contains non-finite values")
        if self.actions is not None:
            self.actions = np.asarray(self.actions, dtype=np.int64)
            if self.actions.shape != (n,):
                raise ValidationError(f"{len(self.actions)} action ids for {n} samples")
            if n and (self.actions.min() < 0 or self.actions.max() > 0xFFFF):
                raise ValidationError("action ids must fit in u16")

    def __len__(self) -> int:
        return len(self.inputs)

    def __getitem__(self, i: int) -> PoseSample:
        action = None if self.actions is None else int(self.actions[i])
        return PoseSample(self.inputs[i], self.targets[i], action)

    @property
    def joint_count(self) -> int:
        return JOINTS

    def subset(self, idx) -> "PoseDataset":
        idx = np.asarray(idx)
        return PoseDataset(
            self.inputs[idx], self.targets[idx],
            None if self.actions is None else self.actions[idx],
            self.normalizer, self.camera,
            None if self.root_translation is None else self.root_translation[idx],
        )


# ---------------------------------------------------------------------------
# binary and CSV I/O


def dataset_to_bytes(ds: PoseDataset) -> bytes:
    has_actions = ds.actions is not None
    head = DATA_MAGIC + struct.pack("<HIIB", DATA_VERSION, len(ds), JOINTS, int(has_actions))
    xs = ds.inputs.astype("<f4").reshape(len(ds), JOINTS * 2)
    ys = ds.targets.astype("<f4").reshape(len(ds), JOINTS * 3)
    if has_actions:
        rec = np.dtype([("x", "<f4", JOINTS * 2), ("y", "<f4", JOINTS * 3), ("a", "<u2")])
    else:
        rec = np.dtype([("x", "<f4", JOINTS * 2), ("y", "<f4", JOINTS * 3)])
    arr = np.zeros(len(ds), dtype=rec)
    arr["x"], arr["y"] = xs, ys
    if has_actions:
        arr["a"] = ds.actions
    return head + arr.tobytes()


def dataset_from_bytes(blob: bytes) -> PoseDataset:
    if blob[:4] != DATA_MAGIC:
        raise BadMagicError("not a pose dataset file (bad magic)")
    head = struct.calcsize("<HIIB")
    if len(blob) < 4 + head:
        raise CorruptionError("dataset header truncated")
    version, n, k, has_actions = struct.unpack_from("<HIIB", blob, 4)
    if version != DATA_VERSION:
        raise VersionMismatchError(f"dataset format version {version}, expected {DATA_VERSION}")
    if k != JOINTS:
        raise FormatError(f"dataset has joint count {k}, expected {JOINTS}")
    if has_actions not in (0, 1):
        raise FormatError(f"bad has_actions flag {has_actions}")
    fields = [("x", "<f4", JOINTS * 2), ("y", "<f4", JOINTS * 3)] + ([("a", "<u2")] if has_actions else [])
    rec = np.dtype(fields)
    body = blob[4 + head:]
    if len(body) != n * rec.itemsize:
        raise CorruptionError(f"dataset body has {len(body)} bytes, expected {n * rec.itemsize} for {n} records")
    arr = np.frombuffer(body, dtype=rec, count=n)
    xs = arr["x"].astype(np.float64).reshape(n, JOINTS, 2)
    ys = arr["y"].astype(np.float64).reshape(n, JOINTS, 3)
    if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        raise NonFiniteDataError("dataset payload contains NaN or infinite values")
    actions = arr["a"].astype(np.int64) if has_actions else None
    return PoseDataset(xs, ys, actions)


def write_dataset(ds: PoseDataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path: str | Path) -> PoseDataset:
    return dataset_from_bytes(Path(path).read_bytes())


def csv_header() -> list[str]:
    cols = ["action"]
    cols += [f"{c}{j}" for j in range(JOINTS) for c in ("u", "v")]
    cols += [f"{c}{j}" for j in range(JOINTS) for c in ("x", "y", "z")]
    return cols


def write_csv(ds: PoseDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(csv_header())
        for i in range(len(ds)):
            action = "" if ds.actions is None else str(int(ds.actions[i]))
            w.writerow([action, *map(repr, ds.inputs[i].ravel().tolist()), *map(repr, ds.targets[i].ravel().tolist())])


def read_csv(path: str | Path) -> PoseDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != csv_header():
        raise FormatError(f"CSV header must be: {','.join(csv_header()[:3])},... ({len(csv_header())} columns)")
    body = [r for r in rows[1:] if r]
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(csv_header()):
            raise FormatError(f"CSV line {lineno}: {len(r)} columns, expected {len(csv_header())}")
    try:
        values = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), len(csv_header()) - 1)
    except ValueError as exc:
        raise FormatError(f"CSV: {exc}") from None
    actions_raw = [r[0] for r in body]
    if any(actions_raw) and not all(actions_raw):
        raise FormatError("CSV: action column must be filled for all rows or none")
    actions = np.array([int(a) for a in actions_raw], dtype=np.int64) if body and all(actions_raw) else None
    if not np.isfinite(values).all():
        raise NonFiniteDataError("CSV contains non-finite values")
    n2 = JOINTS * 2
    return PoseDataset(values[:, :n2].reshape(-1, JOINTS, 2), values[:, n2:].reshape(-1, JOINTS, 3), actions)


# ---------------------------------------------------------------------------
# normalization


def root_align(poses: np.ndarray) -> np.ndarray:
    """Translate every pose so joint 0 (pelvis) is at the origin."""
    return poses - poses[..., :1, :]


def fit_normalizer(train: PoseDataset) -> Normalizer:
    if len(train) == 0:
        raise ValidationError("cannot fit a normalizer on an empty dataset")
    targets = root_align(train.targets)
    return Normalizer(
        train.inputs.mean(axis=0), np.maximum(train.inputs.std(axis=0), STD_FLOOR),
        targets.mean(axis=0), np.maximum(targets.std(axis=0), STD_FLOOR),
    )


def normalize_inputs(norm: Normalizer, inputs: np.ndarray) -> np.ndarray:
    return (inputs - norm.input_mean) / norm.input_std


def normalize_targets(norm: Normalizer, targets: np.ndarray) -> np.ndarray:
    return (root_align(targets) - norm.target_mean) / norm.target_std


def apply_normalizer(norm: Normalizer, ds: PoseDataset) -> tuple[np.ndarray, np.ndarray]:
    """Standardized ``(inputs, root-aligned targets)`` arrays."""
    return normalize_inputs(norm, ds.inputs), normalize_targets(norm, ds.targets)


def invert_normalizer(norm: Normalizer, targets_norm: np.ndarray) -> np.ndarray:
    """Standardized targets back to root-aligned millimetres."""
    return targets_norm * norm.target_std + norm.target_mean


def invert_inputs(norm: Normalizer, inputs_norm: np.ndarray) -> np.ndarray:
    return inputs_norm * norm.input_std + norm.input_mean


# ---------------------------------------------------------------------------
# batching


def batch_iter(dataset, batch_size: int, seed: int, epochs: int | None = 1) -> Iterator[np.ndarray]:
    """Index batches; epoch ``e`` is a fresh permutation drawn from ``(seed, e)``.

    The final short batch of each epoch is included. ``epochs=None`` cycles
    forever.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    n = dataset if isinstance(dataset, int) else len(dataset)
    epoch = 0
    while epochs is None or epoch < epochs:
        perm = make_rng(seed, STREAM_SHUFFLE, epoch).permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size]
        epoch += 1
        if n == 0:
            return


# ---------------------------------------------------------------------------
# synthetic data

PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 8, 10, 11, 8, 13, 14)

# child offset from parent in the body rest frame (x: subject's left, y: up, z: forward), mm
REST_OFFSETS = np.array([
    [0, 0, 0],
    [-130, 0, 0], [0, -450, 0], [0, -440, 0],
    [130, 0, 0], [0, -450, 0], [0, -440, 0],
    [0, 230, 0], [0, 250, 0], [0, 200, 0],
    [150, 0, 0], [0, -280, 0], [0, -250, 0],
    [-150, 0, 0], [0, -280, 0], [0, -250, 0],
], dtype=np.float64)

# local rotation bounds (radians) about x, y, z for joints that have children
ANGLE_LIMITS = {
    1: ((-1.6, 0.5), (-0.4, 0.4), (-0.1, 0.6)),
    4: ((-1.6, 0.5), (-0.4, 0.4), (-0.6, 0.1)),
    2: ((0.0, 2.2), (0.0, 0.0), (0.0, 0.0)),
    5: ((0.0, 2.2), (0.0, 0.0), (0.0, 0.0)),
    7: ((-0.2, 0.7), (-0.5, 0.5), (-0.3, 0.3)),
    8: ((-0.3, 0.4), (-0.4, 0.4), (-0.2, 0.2)),
    10: ((-2.8, 1.0), (-0.6, 0.6), (0.0, 2.0)),
    13: ((-2.8, 1.0), (-0.6, 0.6), (-2.0, 0.0)),
    11: ((-2.4, 0.0), (0.0, 0.0), (0.0, 0.0)),
    14: ((-2.4, 0.0), (0.0, 0.0), (0.0, 0.0)),
}
ROOT_LIMITS = ((-0.25, 0.25), (-np.pi, np.pi), (-0.15, 0.15))
TRANSLATION_LIMITS = ((-600.0, 600.0), (-300.0, 300.0), (4000.0, 6500.0))


def _euler(angles: np.ndarray) -> np.ndarray:
    """[N, 3] xyz Euler angles -> [N, 3, 3] rotations R = Rz @ Ry @ Rx."""
    cx, cy, cz = np.cos(angles).T
    sx, sy, sz = np.sin(angles).T
    n = len(angles)
    Rx = np.zeros((n, 3, 3)); Rx[:, 0, 0] = 1; Rx[:, 1, 1] = cx; Rx[:, 1, 2] = -sx; Rx[:, 2, 1] = sx; Rx[:, 2, 2] = cx
    Ry = np.zeros((n, 3, 3)); Ry[:, 1, 1] = 1; Ry[:, 0, 0] = cy; Ry[:, 0, 2] = sy; Ry[:, 2, 0] = -sy; Ry[:, 2, 2] = cy
    Rz = np.zeros((n, 3, 3)); Rz[:, 2, 2] = 1; Rz[:, 0, 0] = cz; Rz[:, 0, 1] = -sz; Rz[:, 1, 0] = sz; Rz[:, 1, 1] = cz
    return Rz @ Ry @ Rx


def _uniform(rng, limits, n) -> np.ndarray:
    lo = np.array([l for l, _ in limits])
    hi = np.array([h for _, h in limits])
    return lo + (hi - lo) * rng.random((n, len(limits)))


def bone_lengths(poses: np.ndarray, edges=DEFAULT_EDGES) -> np.ndarray:
    """[..., K, 3] -> [..., E] bone lengths along ``edges``."""
    a = np.array([e[0] for e in edges])
    b = np.array([e[1] for e in edges])
    return np.linalg.norm(poses[..., b, :] - poses[..., a, :], axis=-1)


def synth_generate(n: int, seed: int, camera: Camera | None = None, n_actions: int = 0) -> PoseDataset:
    """Random articulated poses of the default skeleton seen by a pinhole camera.

    Bone lengths are fixed; joint angles are drawn uniformly inside
    :data:`ANGLE_LIMITS`, the whole body is yawed freely and placed at a random
    translation in front of the camera. Targets are root-relative camera-frame
    millimetres; inputs are the pixel projections of the translated joints.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    camera = camera or Camera()
    rng = make_rng(seed, STREAM_SYNTH)
    root_rot = _euler(_uniform(rng, ROOT_LIMITS, n))
    local = {j: _euler(_uniform(rng, lim, n)) for j, lim in sorted(ANGLE_LIMITS.items())}
    translation = _uniform(rng, TRANSLATION_LIMITS, n)

    glob = np.empty((n, JOINTS, 3, 3))
    pos = np.zeros((n, JOINTS, 3))
    glob[:, 0] = root_rot
    for j in range(1, JOINTS):
        p = PARENTS[j]
        pos[:, j] = pos[:, p] + glob[:, p] @ REST_OFFSETS[j]
        glob[:, j] = glob[:, p] @ local[j] if j in local else glob[:, p]
    # body frame has y up; camera frame has y down
    cam = pos * np.array([1.0, -1.0, 1.0])
    inputs = camera.project(cam + translation[:, None, :])
    actions = (np.arange(n) % n_actions) if n_actions > 0 else None
    return PoseDataset(inputs, cam, actions, camera=camera, root_translation=translation)


def mean_bone_length(edges=DEFAULT_EDGES) -> float:
    """Mean bone length of the synthetic skeleton, mm."""
    return float(np.mean([np.linalg.norm(REST_OFFSETS[b]) for _, b in edges]))
