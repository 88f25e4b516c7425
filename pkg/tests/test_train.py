import struct

import numpy as np
import pytest

from depthbench import data, mono, stereo
from depthbench.tensor import Tensor
from depthbench.train import (CheckpointError, OptimizerConfig, Trainer, TrainingDiverged, aggregate,
                              evaluate_model, init_optimizer_state, load_checkpoint, optimizer_step,
                              save_checkpoint, train_model)


def _param(v):
    return Tensor(np.array(v, dtype=float), requires_grad=True)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def test_sgd_step():
    p = _param([1.0])
    cfg = OptimizerConfig(kind="sgd", lr=0.1)
    optimizer_step([p], [np.array([0.5])], init_optimizer_state([p], cfg), cfg)
    assert p.data[0] == 0.95


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_leaves_parameters(kind):
    p = _param([1.0, -2.0])
    cfg = OptimizerConfig(kind=kind)
    state = init_optimizer_state([p], cfg)
    for _ in range(3):
        optimizer_step([p], [np.zeros(2)], state, cfg)
        optimizer_step([p], [None], state, cfg)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


@pytest.mark.parametrize("g", [1e-3, 0.7, -5.0, 300.0])
def test_adam_first_step_moves_by_lr(g):
    p = _param(np.zeros(4))
    cfg = OptimizerConfig(kind="adam", lr=5e-4)
    optimizer_step([p], [np.full(4, g)], init_optimizer_state([p], cfg), cfg)
    np.testing.assert_allclose(np.abs(p.data), 5e-4, atol=1e-6)
    assert np.all(np.sign(p.data) == -np.sign(g))


def test_optimizer_shape_mismatch_and_config_errors():
    p = _param([1.0])
    cfg = OptimizerConfig(kind="sgd")
    with pytest.raises(ValueError):
        optimizer_step([p], [np.ones(2)], init_optimizer_state([p], cfg), cfg)
    with pytest.raises(ValueError):
        OptimizerConfig(kind="rmsprop")
    with pytest.raises(ValueError):
        OptimizerConfig(lr=-1.0)
    with pytest.raises(ValueError):
        OptimizerConfig(batch_size=0)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _mono(size=16, seed=0):
    return mono.build_mono_model(mono.MonoModelConfig("3-1-3", input_size=size), seed)


def _stereo(spn=1, seed=0):
    return stereo.build_anynet(stereo.AnyNetConfig(max_disparity=32, spn_channels=spn), seed)


@pytest.fixture(scope="module")
def mono_set():
    return data.gen_synthetic_mono(0, 8, 16, 16)


@pytest.fixture(scope="module")
def stereo_set():
    return data.gen_synthetic_stereo(0, 8, 32, 64, max_disp=12)


def test_batches_cover_each_epoch(mono_set):
    t = Trainer(_mono(), mono_set * 2, OptimizerConfig(batch_size=4, seed=3))
    for epoch in range(3):
        idx = np.concatenate([t.batch_indices(epoch * 4 + k) for k in range(4)])
        assert sorted(idx) == list(range(16))
    assert not np.array_equal(t.batch_indices(0), t.batch_indices(4))


def test_runs_are_bitwise_reproducible(mono_set, stereo_set):
    for build, samples in ((_mono, mono_set), (_stereo, stereo_set)):
        cfg = OptimizerConfig(max_steps=6, seed=4)
        h1 = train_model(build(), samples, cfg, val_samples=samples[:2])
        h2 = train_model(build(), samples, cfg, val_samples=samples[:2])
        assert h1.deterministic_view() == h2.deterministic_view()
        assert len(h1.step_loss) == 6 and len(h1.epoch_val) == len(h1.epoch_seconds) == 3


def test_zero_learning_rate_keeps_loss_constant(stereo_set):
    h = train_model(_stereo(), stereo_set[:4], OptimizerConfig(lr=0.0, max_steps=5))
    np.testing.assert_allclose(h.step_loss, h.step_loss[0], rtol=1e-12)


def test_stereo_history_records_every_stage(stereo_set):
    h = train_model(_stereo(), stereo_set, OptimizerConfig(max_steps=2))
    assert set(h.step_parts[0]) == {"loss"} | {f"smooth_l1_stage{k}" for k in (1, 2, 3, 4)}


def test_divergence_guard(mono_set):
    def exploding(model, batch):
        return Tensor(np.array(np.inf)), {}

    with pytest.raises(TrainingDiverged):
        train_model(_mono(), mono_set, OptimizerConfig(max_steps=3), objective=exploding)


def test_divergence_guard_on_non_finite_forward(mono_set):
    model = _mono()
    model.store["head.bias"].data[...] = np.nan
    with pytest.raises(TrainingDiverged):
        train_model(model, mono_set, OptimizerConfig(max_steps=1))


def test_empty_dataset():
    with pytest.raises(ValueError):
        Trainer(_mono(), [], OptimizerConfig())


def _head_tail(values, k=10):
    return values[0], float(np.mean(values[-k:]))


def test_mono_overfit_run():
    samples = data.gen_synthetic_mono(3, 16, 32, 32)
    h = train_model(_mono(32), samples, OptimizerConfig(lr=1e-3, max_steps=500))
    first, last = _head_tail(h.step_loss)
    assert last < 0.3 * first


def test_stereo_overfit_run():
    samples = data.gen_synthetic_stereo(3, 16)
    h = train_model(_stereo(spn=2), samples, OptimizerConfig(lr=2e-3, max_steps=500))
    first, last = _head_tail(h.step_loss)
    assert last < 0.3 * first
    for k in (1, 2, 3, 4):
        first, last = _head_tail([p[f"smooth_l1_stage{k}"] for p in h.step_parts])
        assert last <= 0.5 * first


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def test_evaluation_vectors_and_aggregates(stereo_set):
    report = evaluate_model(_stereo(), stereo_set[:5], batch_size=2)
    assert set(report.per_sample) == {f"{m}_stage{k}" for m in ("three_pixel_error", "smooth_l1") for k in (1, 2, 3, 4)}
    for name, values in report.per_sample.items():
        assert len(values) == 5
        v = np.array(values)
        agg = report.aggregates[name]
        assert agg["mean"] == v.mean() and agg["min"] == v.min() and agg["max"] == v.max()
        assert agg["median"] == np.median(v)
        assert agg["q25"] == np.percentile(v, 25) and agg["q75"] == np.percentile(v, 75)


def test_perfect_predictor_scores_zero(stereo_set):
    oracle = lambda model, batch: [Tensor(batch.disparity)] * 4
    report = evaluate_model(_stereo(), stereo_set[:3], predict=oracle)
    for k in (1, 2, 3, 4):
        assert report.aggregates[f"three_pixel_error_stage{k}"]["max"] == 0.0


def test_mono_evaluation(mono_set):
    model = _mono()
    report = evaluate_model(model, mono_set, metrics=["ssim"])
    assert list(report.per_sample) == ["ssim"] and len(report.per_sample["ssim"]) == len(mono_set)
    assert model.training
    perfect = evaluate_model(model, mono_set, predict=lambda m, b: Tensor(b.depth))
    assert abs(perfect.aggregates["ssim"]["min"] - 1.0) < 1e-12
    with pytest.raises(ValueError):
        evaluate_model(model, [])


def test_aggregate_statistics():
    agg = aggregate([4.0, 1.0, 3.0, 2.0, 5.0])
    assert agg == {"mean": 3.0, "median": 3.0, "q25": 2.0, "q75": 4.0, "min": 1.0, "max": 5.0}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_bytes_roundtrip(stereo_set):
    t = Trainer(_stereo(), stereo_set, OptimizerConfig(max_steps=3))
    t.train()
    blob = t.save_checkpoint()
    assert blob[:8] == b"DPBENCH1"
    ck = load_checkpoint(blob)
    assert ck.step == 3 and ck.task == "stereo"
    for name, arr in t.model.store.state().items():
        np.testing.assert_array_equal(ck.params[name], arr)
    restored = Trainer.from_checkpoint(blob, stereo_set)
    assert restored.save_checkpoint() == blob


@pytest.mark.parametrize("kind", ["adam", "sgd"])
def test_resume_matches_uninterrupted_run(stereo_set, kind):
    cfg = OptimizerConfig(kind=kind, max_steps=100, lr=1e-3, seed=9)
    full = Trainer(_stereo(), stereo_set, cfg)
    full.train()
    first = Trainer(_stereo(), stereo_set, cfg)
    first.train(50)
    resumed = Trainer.from_checkpoint(first.save_checkpoint(), stereo_set)
    resumed.train()
    assert first.history.step_loss + resumed.history.step_loss == full.history.step_loss
    assert first.history.step_parts + resumed.history.step_parts == full.history.step_parts
    assert resumed.save_checkpoint() == full.save_checkpoint()


def test_mono_resume(mono_set):
    cfg = OptimizerConfig(max_steps=10)
    full = Trainer(_mono(), mono_set, cfg)
    full.train()
    half = Trainer(_mono(), mono_set, cfg)
    half.train(5)
    resumed = Trainer.from_checkpoint(half.save_checkpoint(), mono_set)
    resumed.train()
    assert half.history.step_loss + resumed.history.step_loss == full.history.step_loss


def test_checkpoint_corruption_detected():
    model = _mono()
    cfg = OptimizerConfig()
    blob = save_checkpoint(model, init_optimizer_state(model.store.trainable(), cfg), cfg, 0)
    with pytest.raises(CheckpointError):
        load_checkpoint(b"DPBENCH2" + blob[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(blob[:8] + struct.pack("<I", 99) + blob[12:])
    with pytest.raises(CheckpointError):
        load_checkpoint(blob[:-1])
    with pytest.raises(CheckpointError):
        load_checkpoint(blob[:30])
    with pytest.raises(CheckpointError):
        load_checkpoint(blob + b"\0")
