import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from graphsh.data import PoseDataset, fit_normalizer, normalize_targets, synth_generate
from graphsh.errors import ConfigError, ValidationError
from graphsh.evaluation import EvalReport, evaluate, mpjpe, per_sample_mpjpe

coords = st.floats(-2e3, 2e3, allow_nan=False, allow_infinity=False)
pose = arrays(np.float64, (16, 3), elements=coords)


def brute_force_mpjpe(pred, gt):
    total = 0.0
    for j in range(16):
        d = 0.0
        for c in range(3):
            d += ((pred[j][c] - pred[0][c]) - (gt[j][c] - gt[0][c])) ** 2
        total += math.sqrt(d)
    return total / 16


class Oracle:
    """Predicts the normalized ground truth for the dataset it was built from."""

    def __init__(self, dataset, normalizer):
        self.lookup = {x.tobytes(): y for x, y in zip(dataset.inputs, normalize_targets(normalizer, dataset.targets))}
        self.normalizer = normalizer

    def predict(self, x_norm):
        raw = x_norm * self.normalizer.input_std + self.normalizer.input_mean
        return np.stack([self._find(r) for r in raw])

    def _find(self, r):
        key = min(self.lookup, key=lambda k: np.abs(np.frombuffer(k).reshape(16, 2) - r).max())
        return self.lookup[key]


def test_identity_is_zero(rng):
    gt = rng.normal(size=(16, 3)) * 100
    assert mpjpe(gt, gt) == 0.0


def test_three_four_five_offset(rng):
    gt = rng.normal(size=(16, 3)) * 100
    pred = gt + np.array([3.0, 0.0, 4.0])
    assert mpjpe(pred, gt) == pytest.approx(0.0, abs=1e-12)
    assert mpjpe(pred, gt, align=False) == pytest.approx(5.0, rel=1e-12)


def test_matches_brute_force(rng):
    for _ in range(200):
        pred, gt = rng.normal(size=(16, 3)) * 300, rng.normal(size=(16, 3)) * 300
        assert abs(mpjpe(pred, gt) - brute_force_mpjpe(pred, gt)) <= 1e-12 * max(1.0, brute_force_mpjpe(pred, gt))


def test_non_finite_input():
    bad = np.zeros((16, 3))
    bad[4, 1] = np.inf
    with pytest.raises(ValidationError):
        mpjpe(bad, np.zeros((16, 3)))


@given(pose, pose, arrays(np.float64, 3, elements=coords))
def test_metric_properties(a, b, shift):
    d = mpjpe(a, b)
    assert d >= 0
    assert d == pytest.approx(mpjpe(b, a), rel=1e-12, abs=1e-9)
    assert mpjpe(a + shift, b + shift) == pytest.approx(d, rel=1e-9, abs=1e-6)
    assert mpjpe(a, a + shift) == pytest.approx(0.0, abs=1e-9)


# ---------------------------------------------------------------- evaluate


@pytest.fixture(scope="module")
def labelled():
    return synth_generate(30, 11, n_actions=3)


def test_oracle_model_scores_zero(labelled):
    norm = fit_normalizer(labelled)
    report = evaluate(Oracle(labelled, norm), labelled, norm)
    assert report.overall_mpjpe_mm == pytest.approx(0.0, abs=1e-9)
    assert report.sample_count == 30


def test_per_action_aggregation(labelled):
    norm = fit_normalizer(labelled)
    report = evaluate(_Constant(), labelled, norm)
    counts = [c for _, c in report.per_action.values()]
    assert sum(counts) == report.sample_count
    weighted = sum(e * c for e, c in report.per_action.values()) / report.sample_count
    assert weighted == pytest.approx(report.overall_mpjpe_mm, abs=1e-9)
    errs = per_sample_mpjpe(_Constant().predict_mm(norm, labelled), labelled.targets)
    for action, (err, count) in report.per_action.items():
        sel = errs[labelled.actions == action]
        assert count == len(sel) and err == pytest.approx(sel.mean(), rel=1e-12)


class _Constant:
    def predict(self, x_norm):
        return np.zeros((len(x_norm), 16, 3))

    def predict_mm(self, norm, ds):
        return np.broadcast_to(norm.target_mean, ds.targets.shape)


def test_single_action_matches_overall(labelled):
    ds = PoseDataset(labelled.inputs, labelled.targets, np.full(30, 7))
    report = evaluate(_Constant(), ds, fit_normalizer(ds))
    assert list(report.per_action) == [7]
    assert report.per_action[7] == (pytest.approx(report.overall_mpjpe_mm, rel=1e-12), 30)


def test_order_invariant(labelled):
    norm = fit_normalizer(labelled)
    perm = np.random.default_rng(0).permutation(30)
    a = evaluate(_Constant(), labelled, norm)
    b = evaluate(_Constant(), labelled.subset(perm), norm)
    assert a.overall_mpjpe_mm == b.overall_mpjpe_mm
    assert a.per_action == b.per_action


def test_missing_normalizer(labelled):
    with pytest.raises(ConfigError):
        evaluate(_Constant(), labelled, None)


def test_report_formats():
    report = EvalReport(12.5, 3, {0: (10.0, 1), 2: (13.75, 2)})
    assert report.to_text().splitlines() == [
        "overall\t12.500000\t3",
        "action\t0\t10.000000\t1",
        "action\t2\t13.750000\t2",
    ]
    parsed = json.loads(report.to_json())
    assert parsed["per_action"]["2"] == {"mpjpe_mm": 13.75, "count": 2}
