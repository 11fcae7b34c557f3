"""MPJPE (root-aligned mean per-joint position error) and dataset evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import PoseDataset, Normalizer, invert_normalizer, normalize_inputs, root_align
from .errors import ConfigError, ValidationError


def per_sample_mpjpe(pred: np.ndarray, gt: np.ndarray, align: bool = True) -> np.ndarray:
    """[N, K, 3] x [N, K, 3] -> [N] errors in the input unit."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValidationError(f"mpjpe shape mismatch: {pred.shape} vs {gt.shape}")
    if not (np.isfinite(pred).all() and np.isfinite(gt).all()):
        raise ValidationError("mpjpe input contains non-finite values")
    if align:
        pred, gt = root_align(pred), root_align(gt)
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)


def mpjpe(pred: np.ndarray, gt: np.ndarray, align: bool = True) -> float:
    """Mean Euclidean joint error after aligning joint 0 of both poses to the origin."""
    return float(per_sample_mpjpe(pred, gt, align))


@dataclass
class EvalReport:
    overall_mpjpe_mm: float
    sample_count: int
    per_action: dict[int, tuple[float, int]] = field(default_factory=dict)

    def to_text(self) -> str:
        """Tab-separated lines: ``overall<TAB>mpjpe<TAB>count`` then one ``action`` line per id."""
        lines = [f"overall\t{self.overall_mpjpe_mm:.6f}\t{self.sample_count}"]
        for action, (err, count) in sorted(self.per_action.items()):
            lines.append(f"action\t{action}\t{err:.6f}\t{count}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "overall_mpjpe_mm": self.overall_mpjpe_mm,
            "sample_count": self.sample_count,
            "per_action": {str(a): {"mpjpe_mm": e, "count": c} for a, (e, c) in sorted(self.per_action.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def report_from_errors(errors: np.ndarray, actions: np.ndarray | None) -> EvalReport:
    if len(errors) == 0:
        raise ValidationError("cannot evaluate an empty dataset")
    # fsum keeps the reduction independent of sample order
    overall = math.fsum(errors.tolist()) / len(errors)
    per_action = {}
    if actions is not None:
        for a in np.unique(actions):
            sel = errors[actions == a]
            per_action[int(a)] = (math.fsum(sel.tolist()) / len(sel), len(sel))
    return EvalReport(overall, len(errors), per_action)


def evaluate(model, dataset: PoseDataset, normalizer: Normalizer | None) -> EvalReport:
    """Infer-mode MPJPE of ``model`` on ``dataset`` in millimetres.

    ``model`` needs a ``predict(normalized_inputs) -> normalized_targets``
    method; predictions are de-normalized and root-aligned before scoring.
    """
    if normalizer is None:
        raise ConfigError("evaluate() needs the training normalizer")
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate an empty dataset")
    expected = getattr(getattr(model, "skeleton", None), "joint_count", dataset.joint_count)
    if expected != dataset.joint_count:
        raise ValidationError(f"model expects {expected} joints, dataset has {dataset.joint_count}")
    pred_norm = model.predict(normalize_inputs(normalizer, dataset.inputs))
    pred_mm = invert_normalizer(normalizer, pred_norm)
    return report_from_errors(per_sample_mpjpe(pred_mm, dataset.targets), dataset.actions)
