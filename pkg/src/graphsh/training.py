"""MSE loss, step-decayed learning rate, Adam, and the training loop.

Training log: tab-separated with a header line::

    iteration	lr	loss	val_mpjpe_mm

one row per evaluation, ``loss`` being the mean training loss since the
previous row. Floats are written with ``repr`` so logs are byte-identical
across identical runs.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, NamedTuple

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import Normalizer, PoseDataset, apply_normalizer, batch_iter, fit_normalizer
from .errors import ConfigError, CorruptionError, NonFiniteGradientError, ShapeError, TrainingDivergedError, ValidationError
from .evaluation import evaluate
from .network import PoseModel, load_model, serialize_model
from .rng import STREAM_DROPOUT, make_rng
from .skeleton import SkeletonSpec
from .tensor import GradientMap, Tensor

log = logging.getLogger(__name__)

LOG_HEADER = "iteration\tlr\tloss\tval_mpjpe_mm\n"


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    return T.mean_all(T.square(T.subtract(pred, target)))


def lr_at(iteration: int, config: TrainConfig) -> float:
    return config.learning_rate * config.decay_factor ** (iteration // config.decay_every)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_val: float = math.inf
    seed: int = 0


def adam_step(params: dict[str, Tensor], grads: GradientMap, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    All gradients are checked before anything is modified.
    """
    gs = {}
    for name, p in params.items():
        g = grads[p]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(name, f"{int((~np.isfinite(g)).sum())} non-finite entries")
        gs[name] = g
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = gs[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


class HistoryEntry(NamedTuple):
    iteration: int
    lr: float
    loss: float
    val_mpjpe_mm: float


def log_line(e: HistoryEntry) -> str:
    return f"{e.iteration}\t{e.lr!r}\t{e.loss!r}\t{e.val_mpjpe_mm!r}\n"


# ---------------------------------------------------------------------------
# checkpoints


def _adam_to_bytes(model: PoseModel, state: AdamState, config: TrainConfig) -> bytes:
    cfg = json.dumps(asdict(config), sort_keys=True).encode()
    out = [struct.pack("<QdQ", state.step, state.best_val, state.seed), struct.pack("<I", len(cfg)), cfg]
    names = [n for n, _ in model.named_parameters()]
    out.append(struct.pack("<B", int(bool(state.m))))
    if state.m:
        for n in names:
            out.append(np.ascontiguousarray(state.m[n], dtype="<f8").tobytes())
            out.append(np.ascontiguousarray(state.v[n], dtype="<f8").tobytes())
    return b"".join(out)


def _adam_from_bytes(blob: bytes, model: PoseModel) -> tuple[AdamState, TrainConfig]:
    try:
        step, best, seed = struct.unpack_from("<QdQ", blob, 0)
        pos = struct.calcsize("<QdQ")
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        cfg = TrainConfig(**json.loads(blob[pos:pos + n].decode()))
        pos += n
        (has,) = struct.unpack_from("<B", blob, pos)
        pos += 1
    except (struct.error, ValueError, TypeError) as exc:
        raise CorruptionError(f"bad optimizer section: {exc}") from None
    state = AdamState(step=step, best_val=best, seed=seed)
    if has:
        for name, p in model.named_parameters():
            size = 8 * p.size
            if pos + 2 * size > len(blob):
                raise CorruptionError("optimizer section truncated")
            state.m[name] = np.frombuffer(blob, "<f8", p.size, pos).astype(np.float64).reshape(p.shape)
            state.v[name] = np.frombuffer(blob, "<f8", p.size, pos + size).astype(np.float64).reshape(p.shape)
            pos += 2 * size
    if pos != len(blob):
        raise CorruptionError("trailing bytes in optimizer section")
    return state, cfg


def checkpoint_bytes(model: PoseModel, normalizer: Normalizer, state: AdamState | None = None,
                     config: TrainConfig | None = None) -> bytes:
    sections = {"NORM": normalizer.to_bytes()}
    if state is not None:
        sections["ADAM"] = _adam_to_bytes(model, state, config or TrainConfig())
    return serialize_model(model, sections)


def save_checkpoint(path: str | Path, model: PoseModel, normalizer: Normalizer,
                    state: AdamState | None = None, config: TrainConfig | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, normalizer, state, config))
    tmp.replace(path)


class Checkpoint(NamedTuple):
    model: PoseModel
    normalizer: Normalizer | None
    state: AdamState | None
    config: TrainConfig | None


def load_checkpoint(path: str | Path, skeleton: SkeletonSpec | None = None) -> Checkpoint:
    model, sections = load_model(Path(path).read_bytes(), skeleton)
    norm = Normalizer.from_bytes(sections["NORM"]) if "NORM" in sections else None
    state = cfg = None
    if "ADAM" in sections:
        state, cfg = _adam_from_bytes(sections["ADAM"], model)
    return Checkpoint(model, norm, state, cfg)


# ---------------------------------------------------------------------------
# loop


def train(
    model: PoseModel,
    train_set: PoseDataset,
    val_set: PoseDataset,
    config: TrainConfig,
    normalizer: Normalizer | None = None,
    checkpoint_path: str | Path | None = None,
    log_file: IO[str] | None = None,
) -> tuple[PoseModel, list[HistoryEntry]]:
    """Train ``model`` in place; evaluates every ``eval_every`` iterations.

    The checkpoint at ``checkpoint_path`` is rewritten whenever validation
    MPJPE improves. A non-finite loss raises :class:`TrainingDivergedError`
    and leaves the last written checkpoint untouched.
    """
    if len(train_set) == 0:
        raise ValidationError("training set is empty")
    if len(val_set) == 0:
        raise ValidationError("validation set is empty")
    if config.max_iterations is None:
        raise ConfigError("max_iterations must be set for training")
    normalizer = normalizer or train_set.normalizer or fit_normalizer(train_set)
    xs, ys = apply_normalizer(normalizer, train_set)
    params = dict(model.named_parameters())
    state = AdamState(seed=config.seed)
    batches = batch_iter(len(train_set), config.batch_size, config.seed, epochs=None)
    history: list[HistoryEntry] = []
    if log_file is not None:
        log_file.write(LOG_HEADER)

    running, count = 0.0, 0
    for it in range(config.max_iterations):
        idx = next(batches)
        rng = make_rng(config.seed, STREAM_DROPOUT, it)
        pred, _ = model.forward(Tensor(xs[idx]), "train", rng)
        loss = mse_loss(pred, Tensor(ys[idx]))
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss {value} at iteration {it}")
        lr = lr_at(it, config)
        adam_step(params, T.backward(loss), state, lr)
        running += value
        count += 1
        if (it + 1) % config.eval_every == 0:
            val = evaluate(model, val_set, normalizer).overall_mpjpe_mm
            entry = HistoryEntry(it + 1, lr, running / count, val)
            history.append(entry)
            running, count = 0.0, 0
            log.info("iter %d lr %.3g loss %.6f val %.3f mm", *entry)
            if log_file is not None:
                log_file.write(log_line(entry))
                log_file.flush()
            if val < state.best_val:
                state.best_val = val
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, normalizer, state, config)
    return model, history


def dataset_loss(model: PoseModel, dataset: PoseDataset, normalizer: Normalizer) -> float:
    """Infer-mode MSE over ``dataset`` in normalized target space."""
    xs, ys = apply_normalizer(normalizer, dataset)
    pred = model.predict(xs)
    return float(np.mean((pred - ys) ** 2))
