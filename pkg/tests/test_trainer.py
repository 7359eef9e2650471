"""Tests for Adam, the training loop and the gradient checker."""

from __future__ import annotations

import logging

import numpy as np
import pytest

from mmagg.datastore import ModalitySpec
from mmagg.exceptions import TrainingError
from mmagg.model import init_model, load_model, save_model
from mmagg.trainer import (
    AdamHyperparams,
    OptimizerState,
    adam_step,
    gradient_check,
    init_optimizer,
    make_gradcheck_sample,
    train,
)

from conftest import build_dataset, build_short_tail_dataset, make_rng


def test_first_adam_step_is_sign_scaled():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.array([0.5, -4.0, 0.0])}
    state = init_optimizer(params, AdamHyperparams(lr=0.1))
    updated, state = adam_step(state, params, grads)
    expected = params["w"] - 0.1 * grads["w"] / (np.abs(grads["w"]) + 1e-8)
    np.testing.assert_allclose(updated["w"], expected, rtol=1e-12)
    assert state.step == 1


def test_adam_matches_reference_over_steps():
    rng = make_rng(2)
    hyper = AdamHyperparams(lr=0.01, beta1=0.8, beta2=0.99, eps=1e-6)
    params = {"w": rng.standard_normal(4)}
    state = init_optimizer(params, hyper)
    w, m, v = params["w"].copy(), np.zeros(4), np.zeros(4)
    for step in range(1, 6):
        grad = rng.standard_normal(4)
        params, state = adam_step(state, params, {"w": grad})
        m = 0.8 * m + 0.2 * grad
        v = 0.99 * v + 0.01 * grad**2
        w = w - 0.01 * (m / (1 - 0.8**step)) / (np.sqrt(v / (1 - 0.99**step)) + 1e-6)
    np.testing.assert_allclose(params["w"], w, rtol=1e-12)


def test_zero_learning_rate_only_advances_the_moments():
    params = {"w": make_rng(1).standard_normal(5), "b": np.zeros(2)}
    grads = {"w": make_rng(2).standard_normal(5), "b": np.array([1.0, -1.0])}
    state = init_optimizer(params, AdamHyperparams(lr=0.0))
    updated, state = adam_step(state, params, grads)
    for name, tensor in params.items():
        assert updated[name].tobytes() == tensor.tobytes()
    assert state.step == 1
    np.testing.assert_allclose(state.m["w"], 0.1 * grads["w"])
    np.testing.assert_allclose(state.v["b"], [0.001, 0.001])


def test_adam_keeps_dtype():
    params = {"w": np.ones(3, dtype=np.float32)}
    updated, state = adam_step(init_optimizer(params), params, {"w": np.ones(3)})
    assert updated["w"].dtype == np.float32


def test_non_finite_gradient_skips_step(caplog):
    params = {"w": np.ones(2), "b": np.zeros(1)}
    state = init_optimizer(params)
    with caplog.at_level(logging.WARNING, logger="mmagg.trainer"):
        updated, after = adam_step(state, params, {"w": np.array([np.nan, 1.0]), "b": np.ones(1)})
    assert after is state
    np.testing.assert_array_equal(updated["w"], params["w"])
    assert "non-finite" in caplog.text


def test_adam_rejects_mismatches():
    params = {"w": np.ones(2)}
    state = init_optimizer(params)
    with pytest.raises(TrainingError):
        adam_step(state, params, {"v": np.ones(2)})
    with pytest.raises(TrainingError):
        adam_step(state, params, {"w": np.ones(3)})
    with pytest.raises(TrainingError):
        AdamHyperparams(beta1=1.0)


def test_optimizer_state_tensors_round_trip():
    params = {"a.W": np.ones((2, 2), dtype=np.float32)}
    _, state = adam_step(init_optimizer(params, AdamHyperparams(lr=0.5)), params, {"a.W": np.ones((2, 2))})
    tensors = state.to_tensors()
    assert list(tensors) == ["adam.m.a.W", "adam.v.a.W", "adam.step", "adam.hyper"]
    restored = OptimizerState.from_tensors(tensors)
    assert restored.step == 1 and restored.hyper == state.hyper
    np.testing.assert_array_equal(restored.m["a.W"], state.m["a.W"])
    with pytest.raises(TrainingError):
        OptimizerState.from_tensors({"adam.m.x": np.ones(1)})


def _toy_dataset(root):
    """Two linearly separable classes in one 2-D modality."""
    rng = make_rng(4)
    videos, data = [], {}
    for index in range(12):
        label = index % 2
        video_id = f"toy{index:02d}"
        videos.append((video_id, 20.0, (label,), "train"))
        data[(video_id, "x")] = rng.standard_normal((20, 2)) * 0.5 + (2.0 if label else -2.0)
    return build_dataset(root, modalities=(ModalitySpec("x", 2, 1.0, 2),), videos=videos, num_classes=2, data=data)


def _toy_model(dataset, seed=5):
    return init_model(dataset.modalities, 2, hidden_size=8, experts=2, sample_size=5, seed=seed)


def test_training_reduces_loss(tmp_path):
    dataset = _toy_dataset(tmp_path / "toy")
    result = train(
        _toy_model(dataset), dataset, epochs=20, batch_size=4, seed=1, hyper=AdamHyperparams(lr=1e-2)
    )
    assert len(result.losses) == 20
    assert result.losses[-1] < result.losses[0]
    assert result.optimizer.step == 20 * 3
    assert all(np.all(np.isfinite(tensor)) for tensor in result.model.parameters().values())


def test_training_is_deterministic_and_thread_independent(tmp_path):
    dataset = _toy_dataset(tmp_path / "toy")
    digests = []
    for run, threads in enumerate((1, 1, 3)):
        result = train(_toy_model(dataset), dataset, epochs=2, batch_size=5, seed=9, threads=threads)
        digests.append(save_model(result.model, tmp_path / f"run{run}.mmck", result.optimizer.to_tensors()))
    assert digests[0] == digests[1] == digests[2]
    assert (tmp_path / "run0.mmck").read_bytes() == (tmp_path / "run2.mmck").read_bytes()


def test_resume_continues_from_checkpoint(tmp_path):
    dataset = _toy_dataset(tmp_path / "toy")
    first = train(_toy_model(dataset), dataset, epochs=1, batch_size=4, seed=3)
    path = tmp_path / "resume.mmck"
    save_model(first.model, path, first.optimizer.to_tensors())

    model, tensors = load_model(path)
    optimizer = OptimizerState.from_tensors(tensors)
    assert optimizer.step == first.optimizer.step == 3
    for name, tensor in first.model.parameters().items():
        np.testing.assert_array_equal(model.parameters()[name], tensor)

    resumed = train(model, dataset, epochs=1, batch_size=4, seed=3, optimizer=optimizer)
    assert resumed.optimizer.step == 6


def test_zero_learning_rate_training_keeps_parameters(tmp_path):
    dataset = _toy_dataset(tmp_path / "toy")
    model = _toy_model(dataset)
    result = train(model, dataset, epochs=2, batch_size=4, seed=1, hyper=AdamHyperparams(lr=0.0))
    assert result.optimizer.step == 6
    for name, tensor in model.parameters().items():
        assert result.model.parameters()[name].tobytes() == tensor.tobytes()


def test_training_tolerates_a_file_one_segment_short(tmp_path):
    dataset = build_short_tail_dataset(tmp_path / "tail")
    model = init_model(dataset.modalities, 2, hidden_size=4, sample_size=5, seed=2)
    result = train(model, dataset, epochs=1, batch_size=2, seed=1)
    # two segments for the long video, one for the short one
    assert result.optimizer.step == 2
    assert np.isfinite(result.losses[0])


def test_zero_epochs_returns_the_model(tmp_path):
    dataset = _toy_dataset(tmp_path / "toy")
    model = _toy_model(dataset)
    result = train(model, dataset, epochs=0)
    assert result.losses == [] and result.model is model


def test_train_argument_checks(tmp_path, dataset, model):
    with pytest.raises(TrainingError):
        train(model, dataset, epochs=1, split="test")
    with pytest.raises(TrainingError):
        train(model, dataset, epochs=1, batch_size=0)
    toy = _toy_dataset(tmp_path / "toy")
    with pytest.raises(TrainingError):
        train(model, toy, epochs=1)


def _gradcheck_model(seed=0):
    specs = [ModalitySpec("m0", 3, 1.0, 2), ModalitySpec("m1", 2, 1.0, 2)]
    return init_model(specs, 3, hidden_size=4, experts=2, sample_size=3, seed=seed)


def test_gradient_check_passes():
    model = _gradcheck_model()
    report = gradient_check(model, make_gradcheck_sample(model, seed=1))
    assert report.passed, report.failures()
    assert [entry.name for entry in report.entries][-2:] == ["input.m0", "input.m1"]
    assert len(report.entries) == len(model.parameters()) + 2
    assert report.max_rel_error < 1e-4


def test_large_step_is_flagged_not_fatal():
    model = _gradcheck_model()
    sample = make_gradcheck_sample(model, seed=1)
    fine = gradient_check(model, sample)
    coarse = gradient_check(model, sample, step=1e-1)
    assert coarse.max_rel_error > fine.max_rel_error
    assert coarse.step == 1e-1


def test_zero_input_gradients_are_finite():
    model = _gradcheck_model()
    sample = make_gradcheck_sample(model, seed=1, zero=True)
    assert all(not np.any(array) for array in sample.inputs.values())
    report = gradient_check(model, sample)
    assert all(np.isfinite(entry.max_rel_error) for entry in report.entries)


def test_gradcheck_sample_shapes():
    model = _gradcheck_model()
    sample = make_gradcheck_sample(model, seed=4)
    assert sample.inputs["m1"].shape == (3, 2)
    assert sample.targets.shape == (3,) and sample.targets.max() == 1.0
