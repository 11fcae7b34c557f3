import dataclasses
import io

import numpy as np
import pytest

from graphsh import tensor as T
from graphsh import training
from graphsh.config import NetworkConfig, TrainConfig
from graphsh.data import PoseDataset, apply_normalizer, fit_normalizer, synth_generate
from graphsh.errors import ConfigError, NonFiniteGradientError, ShapeError, TrainingDivergedError, ValidationError
from graphsh.evaluation import evaluate
from graphsh.gradcheck import finite_difference_gradcheck
from graphsh.network import build_model, parameter_snapshot, serialize_model
from graphsh.tensor import GradientMap, Tensor, backward
from graphsh.training import AdamState, adam_step, load_checkpoint, lr_at, mse_loss, train

TINY = NetworkConfig(stacks=1, channels=8, se_ratio=4)


@pytest.fixture(scope="module")
def tiny_data():
    return synth_generate(24, 3, n_actions=2), synth_generate(8, 4, n_actions=2)


def _model(seed=0, **kw):
    return build_model(dataclasses.replace(TINY, **kw), rng=seed)


# ---------------------------------------------------------------- loss and schedule


def test_mse_identity_and_offset(rng):
    y = rng.normal(size=(2, 16, 3))
    assert mse_loss(Tensor(y), Tensor(y)).item() == 0.0
    assert mse_loss(Tensor(y + 1.0), Tensor(y)).item() == pytest.approx(1.0, rel=1e-14)


def test_mse_gradient(rng):
    p, y = rng.normal(size=(2, 16, 3)), rng.normal(size=(2, 16, 3))
    pt = Tensor(p, requires_grad=True)
    np.testing.assert_allclose(backward(mse_loss(pt, Tensor(y)))[pt], 2 * (p - y) / p.size, rtol=1e-14)
    assert finite_difference_gradcheck(lambda t: mse_loss(t, Tensor(y)), p) < 1e-8


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        mse_loss(Tensor(np.zeros((2, 16, 3))), Tensor(np.zeros((1, 16, 3))))


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-4
    assert lr_at(19999, cfg) == 1e-4
    assert lr_at(20000, cfg) == pytest.approx(1e-4 * 0.92, rel=1e-15)
    assert lr_at(40000, cfg) == pytest.approx(1e-4 * 0.92 ** 2, rel=1e-15)


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_is_fixed_point():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState()
    adam_step({"p": p}, GradientMap({p: np.array([0.5, 0.5])}), state, 1e-3)
    before, m, v = p.data.copy(), state.m["p"].copy(), state.v["p"].copy()
    adam_step({"p": p}, GradientMap(), state, 1e-3)
    np.testing.assert_allclose(np.abs(state.m["p"]), 0.9 * np.abs(m), rtol=1e-15)
    np.testing.assert_allclose(state.v["p"], 0.999 * v, rtol=1e-15)
    # the decayed first moment still moves the parameter; only a fresh state is a strict fixed point
    fresh = Tensor(np.array([3.0]), requires_grad=True)
    adam_step({"q": fresh}, GradientMap(), AdamState(), 1e-3)
    assert fresh.data.tolist() == [3.0]
    assert state.step == 2 and not np.array_equal(before, p.data)


@pytest.mark.parametrize("g", [3.7, -0.02, 1e4])
def test_adam_first_step_has_magnitude_lr(g):
    p = Tensor(np.array([0.0]), requires_grad=True)
    adam_step({"p": p}, GradientMap({p: np.array([g])}), AdamState(), 1e-3)
    assert p.data[0] == pytest.approx(-np.sign(g) * 1e-3, rel=1e-6)


def test_adam_rejects_non_finite_gradient_by_name():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(NonFiniteGradientError, match="bias"):
        adam_step({"weight": a, "bias": b}, GradientMap({a: np.ones(2), b: np.array([1.0, np.inf])}), AdamState(), 1e-3)
    assert a.data.tolist() == [1.0, 1.0]


def test_adam_shape_mismatch():
    a = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ShapeError):
        adam_step({"a": a}, GradientMap({a: np.ones(3)}), AdamState(), 1e-3)


def test_tiny_learning_rate_descends(tiny_data, rng):
    train_set, _ = tiny_data
    model = _model(dropout_p=0.0)
    x, y = apply_normalizer(fit_normalizer(train_set), train_set)
    params, state, losses = dict(model.named_parameters()), AdamState(), []
    for _ in range(11):
        loss = mse_loss(model.forward(Tensor(x), "train")[0], Tensor(y))
        losses.append(loss.item())
        adam_step(params, backward(loss), state, 1e-7)
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


# ---------------------------------------------------------------- loop


def test_history_and_log(tiny_data, tmp_path):
    train_set, val_set = tiny_data
    log = io.StringIO()
    model, history = train(_model(), train_set, val_set, TrainConfig(max_iterations=25, eval_every=10, batch_size=8),
                           checkpoint_path=tmp_path / "m.gshm", log_file=log)
    assert len(history) == 25 // 10
    lines = log.getvalue().splitlines()
    assert lines[0] == "iteration\tlr\tloss\tval_mpjpe_mm"
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["10", "20"]
    assert all(np.isfinite(e.loss) and e.loss > 0 and e.val_mpjpe_mm > 0 for e in history)


def test_first_loss_finite_and_positive(tiny_data):
    train_set, _ = tiny_data
    assert 0 < training.dataset_loss(_model(), train_set, fit_normalizer(train_set)) < np.inf


def test_training_is_bit_reproducible(tiny_data):
    train_set, val_set = tiny_data
    cfg = TrainConfig(max_iterations=100, eval_every=50, batch_size=8, seed=2)
    runs = [train(_model(1), train_set, val_set, cfg) for _ in range(2)]
    assert serialize_model(runs[0][0]) == serialize_model(runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_empty_datasets_are_rejected(tiny_data):
    train_set, val_set = tiny_data
    empty = PoseDataset(np.zeros((0, 16, 2)), np.zeros((0, 16, 3)))
    cfg = TrainConfig(max_iterations=1)
    with pytest.raises(ValidationError, match="training set is empty"):
        train(_model(), empty, val_set, cfg)
    with pytest.raises(ValidationError, match="validation set is empty"):
        train(_model(), train_set, empty, cfg)


def test_max_iterations_is_required(tiny_data):
    with pytest.raises(ConfigError):
        train(_model(), *tiny_data, TrainConfig())


def test_evaluation_leaves_model_untouched(tiny_data):
    train_set, val_set = tiny_data
    model = _model()
    model.forward(Tensor(apply_normalizer(fit_normalizer(train_set), train_set)[0]), "train", np.random.default_rng(0))
    before = serialize_model(model)
    evaluate(model, val_set, fit_normalizer(train_set))
    assert serialize_model(model) == before


def test_checkpoint_round_trip(tiny_data, tmp_path):
    train_set, val_set = tiny_data
    path = tmp_path / "m.gshm"
    cfg = TrainConfig(max_iterations=20, eval_every=10, batch_size=8)
    model, history = train(_model(), train_set, val_set, cfg, checkpoint_path=path)
    ckpt = load_checkpoint(path)
    assert ckpt.state.step in (10, 20) and ckpt.config == cfg
    assert ckpt.state.best_val == min(e.val_mpjpe_mm for e in history)
    for name, p in ckpt.model.named_parameters():
        assert ckpt.state.m[name].shape == p.shape
    norm = fit_normalizer(train_set)
    np.testing.assert_array_equal(ckpt.normalizer.target_std, norm.target_std)
    assert evaluate(ckpt.model, val_set, ckpt.normalizer).overall_mpjpe_mm == ckpt.state.best_val


def test_divergence_keeps_last_good_checkpoint(tiny_data, tmp_path, monkeypatch):
    train_set, val_set = tiny_data
    path = tmp_path / "m.gshm"
    calls = {"n": 0}
    real = training.mse_loss

    def flaky(pred, target):
        calls["n"] += 1
        loss = real(pred, target)
        return T.scale(loss, np.nan) if calls["n"] > 12 else loss

    saved = {}
    real_save = training.save_checkpoint

    def spy(p, model, *a, **k):
        real_save(p, model, *a, **k)
        saved["bytes"] = path.read_bytes()

    monkeypatch.setattr(training, "mse_loss", flaky)
    monkeypatch.setattr(training, "save_checkpoint", spy)
    with pytest.raises(TrainingDivergedError, match="iteration 12"):
        train(_model(), train_set, val_set, TrainConfig(max_iterations=40, eval_every=5, batch_size=8),
              checkpoint_path=path)
    assert path.read_bytes() == saved["bytes"]
    assert load_checkpoint(path).state.step in (5, 10)


def test_parameter_snapshot_is_a_copy():
    model = _model()
    snap = parameter_snapshot(model)
    next(iter(model.parameters())).data[...] = 42.0
    assert not np.any(snap[0] == 42.0)
