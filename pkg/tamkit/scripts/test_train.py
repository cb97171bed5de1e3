"""
Tests for the training loop: determinism, run artifacts, failure handling and trends.
"""

import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

# Add scripts directory to path for imports (needed for pytest)
scripts_dir = Path(__file__).parent
if str(scripts_dir) not in sys.path:
    sys.path.insert(0, str(scripts_dir))

from config import RunConfig  # noqa: E402
from datasets import synthetic_dataset  # noqa: E402
from errors import CorpusError, NumericError  # noqa: E402
from inference import score_model  # noqa: E402
from storage import RunWriter, load_train_log  # noqa: E402
from train import (  # noqa: E402
    M_TXT,
    TrainingData,
    class_name_inputs,
    init_model,
    load_model,
    moving_average,
    train,
)


def tiny_config(**overrides) -> RunConfig:
    values = dict(num_images=4, image_size=24, hidden_channels="4", epochs=2, batch_size=2)
    values.update(overrides)
    return RunConfig(**values).validate()


@pytest.fixture(scope="module")
def dataset():
    return synthetic_dataset(tiny_config(), "train")


def test_training_is_deterministic(dataset):
    config = tiny_config()
    a = train(dataset.training_data(), config)
    b = train(dataset.training_data(), config)
    assert a.log == b.log
    for name, value in a.model.tensors().items():
        np.testing.assert_array_equal(value, b.model.tensors()[name])


def test_log_rows(dataset):
    config = tiny_config(lambda_ac=0.0)
    result = train(dataset.training_data(), config)
    assert result.steps == 4
    assert [row["step"] for row in result.log] == [0, 1, 2, 3]
    assert [row["epoch"] for row in result.log] == [0, 0, 1, 1]
    assert all(row["loss_ac"] == 0.0 for row in result.log)
    assert result.log[0]["lr"] == pytest.approx(config.lr_weights)
    assert result.log[-1]["lr"] < result.log[0]["lr"]
    for row in result.log:
        expected = config.lambda_cls * row["loss_cls"] + config.lambda_cpt * row["loss_cpt"]
        assert row["loss_total"] == pytest.approx(expected)


def test_parameters_move(dataset):
    config = tiny_config()
    start = init_model(config, dataset.table.dim, np.random.default_rng(np.random.SeedSequence(0).spawn(4)[0]))
    result = train(dataset.training_data(), config)
    for name, value in start.tensors().items():
        assert not np.array_equal(value, result.model.tensors()[name]), name


def test_writer_gets_log_and_checkpoint(dataset):
    config = tiny_config()
    with tempfile.TemporaryDirectory() as tmpdir:
        writer = RunWriter(tmpdir)
        result = train(dataset.training_data(), config, writer)
        log = load_train_log(tmpdir)
        model, meta = load_model(writer.checkpoint_file)

    assert len(log) == len(result.log)
    assert meta["epoch"] == 2
    assert meta["classes"] == ["square", "circle", "triangle"]
    assert meta["w_res"] == config.w_res
    for name, value in result.model.tensors().items():
        # stored as float32
        np.testing.assert_allclose(model.tensors()[name], value, rtol=1e-6, atol=1e-7)
    assert M_TXT in model.tensors()


def test_empty_corpus(dataset):
    data = TrainingData(dataset.vocab, dataset.lexicon, dataset.bank(), [], {})
    with pytest.raises(CorpusError):
        train(data, tiny_config())


def test_nonfinite_training_aborts_and_keeps_log(dataset):
    config = tiny_config(lr_weights=1e300, lr_biases=1e300)
    with tempfile.TemporaryDirectory() as tmpdir:
        writer = RunWriter(tmpdir)
        with np.errstate(all="ignore"):
            with pytest.raises(NumericError):
                train(dataset.training_data(), config, writer)
        assert writer.train_log_file.exists()


def test_class_name_inputs(dataset):
    inputs = class_name_inputs(dataset.vocab, dataset.bank())
    assert inputs.shape == (3, dataset.table.dim)
    np.testing.assert_allclose(np.linalg.norm(inputs, axis=1), 1.0)


def test_moving_average():
    np.testing.assert_allclose(moving_average([1, 2, 3, 4], window=2), [1.5, 2.5, 3.5])
    np.testing.assert_allclose(moving_average([1, 2], window=5), [1, 2])


@pytest.mark.slow
def test_concepts_loss_improves_labels():
    """Default synthetic run: the concepts loss helps and training beats the untrained encoder."""
    config = RunConfig()
    dataset = synthetic_dataset(config, "train")

    def trained_iou(cfg):
        bank = dataset.bank()
        result = train(dataset.training_data(bank), cfg)
        return score_model(result.model, dataset, bank, cfg.alpha).mean_iou

    full = trained_iou(config)
    without_concepts = trained_iou(replace(config, lambda_cpt=0.0))

    bank = dataset.bank()
    init_seq = np.random.SeedSequence(config.seed).spawn(4)[0]
    untrained_model = init_model(config, bank.dim, np.random.default_rng(init_seq))
    untrained = score_model(untrained_model, dataset, bank, config.alpha).mean_iou

    assert full > without_concepts
    assert full >= 0.45
    assert untrained <= 0.15


@pytest.mark.slow
def test_auto_consistency_keeps_flip_consistency():
    # mirrored training images would hand the flip consistency to the augmentation
    config = RunConfig(mirror_prob=0.0)
    dataset = synthetic_dataset(config, "train")

    def flip_rate(cfg):
        bank = dataset.bank()
        result = train(dataset.training_data(bank), cfg)
        return score_model(result.model, dataset, bank, cfg.alpha).flip_consistency

    assert flip_rate(config) >= flip_rate(replace(config, lambda_ac=0.0))


def test_first_epoch_loss_trends_down():
    config = RunConfig(epochs=1)
    data = synthetic_dataset(config, "train").training_data()
    result = train(data, config)
    totals = [row["loss_total"] for row in result.log]
    assert len(totals) == config.num_images // config.batch_size
    smoothed = moving_average(totals, window=10)
    assert smoothed[-1] < smoothed[0]
