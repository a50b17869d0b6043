"""Schedules, the optimizer, and plain classifier training."""

import numpy as np
import pytest

from mgkd import InvalidArgumentError, build_plain_model, top1_accuracy
from mgkd.nn import Parameter
from mgkd.train import SGD, TrainSchedule, train_classifier, write_metrics_csv


class TestTrainSchedule:
    def test_milestone_decay(self):
        sched = TrainSchedule(epochs=10, initial_lr=0.1, milestones=(3, 6))
        assert sched.lr_at(0) == 0.1
        assert sched.lr_at(3) == pytest.approx(0.01)
        assert sched.lr_at(6) == pytest.approx(0.001)
        assert sched.lr_at(9) == pytest.approx(0.001)

    def test_milestones_must_increase(self):
        with pytest.raises(InvalidArgumentError, match="strictly increasing"):
            TrainSchedule(epochs=10, initial_lr=0.1, milestones=(5, 5))

    def test_milestones_must_precede_end(self):
        with pytest.raises(InvalidArgumentError, match="epochs"):
            TrainSchedule(epochs=10, initial_lr=0.1, milestones=(10,))

    def test_bad_lr_and_epochs(self):
        with pytest.raises(InvalidArgumentError):
            TrainSchedule(epochs=0, initial_lr=0.1)
        with pytest.raises(InvalidArgumentError):
            TrainSchedule(epochs=5, initial_lr=-0.1)

    def test_unknown_optimizer(self):
        with pytest.raises(InvalidArgumentError, match="optimizer"):
            TrainSchedule(epochs=5, initial_lr=0.1, optimizer="adamw")

    def test_scaled_keeps_structure(self):
        full = TrainSchedule(epochs=240, initial_lr=0.005, milestones=(150, 180, 210))
        desk = full.scaled(1 / 6)
        assert desk.epochs == 40
        assert desk.milestones == (25, 30, 35)
        assert desk.initial_lr == full.initial_lr

    def test_scaled_tiny_collapses_gracefully(self):
        full = TrainSchedule(epochs=60, initial_lr=0.1, milestones=(30, 45))
        tiny = full.scaled(0.02)
        assert tiny.epochs >= 1
        assert all(1 <= m < tiny.epochs for m in tiny.milestones)


class TestSGD:
    def test_momentum_update_matches_reference(self):
        p = Parameter(np.array([1.0, 2.0], dtype=np.float32))
        opt = SGD({"p": p}, momentum=0.9)
        p.accumulate(np.array([0.5, -1.0]))
        opt.step(lr=0.1)
        np.testing.assert_allclose(p.value, [1.0 - 0.05, 2.0 + 0.1], rtol=1e-6)
        opt.zero_grad()
        p.accumulate(np.array([0.0, 0.0]))
        opt.step(lr=0.1)
        # velocity persists: v = 0.9 * [0.5, -1.0]
        np.testing.assert_allclose(p.value, [0.95 - 0.045, 2.1 + 0.09], rtol=1e-6)

    def test_params_without_grad_untouched(self):
        p = Parameter(np.array([3.0], dtype=np.float32))
        opt = SGD({"p": p}, momentum=0.9)
        opt.step(lr=1.0)
        np.testing.assert_array_equal(p.value, [3.0])


class TestTrainClassifier:
    def test_learns_the_separable_fixture(self, separable):
        model = build_plain_model("mlp", separable["train"].in_shape, (16, 16), 3, seed=1)
        records = train_classifier(
            model, separable["train"], TrainSchedule(epochs=10, initial_lr=0.05, batch_size=32),
            seed=1, val_data=separable["val"],
        )
        assert records[-1]["train_acc"] > 0.95
        assert top1_accuracy(model, separable["test"]) > 0.95

    def test_empty_split_rejected(self, separable):
        from dataclasses import replace

        model = build_plain_model("mlp", separable["train"].in_shape, (16, 16), 3, seed=1)
        empty = replace(
            separable["train"],
            images=separable["train"].images[:0],
            labels=separable["train"].labels[:0],
        )
        with pytest.raises(InvalidArgumentError):
            train_classifier(model, empty, TrainSchedule(epochs=1, initial_lr=0.1), seed=0)

    def test_deterministic_given_seed(self, separable):
        outs = []
        for _ in range(2):
            model = build_plain_model("mlp", separable["train"].in_shape, (16, 16), 3, seed=2)
            train_classifier(
                model, separable["train"], TrainSchedule(epochs=3, initial_lr=0.05), seed=9
            )
            outs.append(model.native_logits(separable["test"].images))
        np.testing.assert_array_equal(outs[0], outs[1])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_numeric_error(self, separable):
        from mgkd import NonFiniteLossError

        model = build_plain_model("mlp", separable["train"].in_shape, (16, 16), 3, seed=3)
        with pytest.raises(NonFiniteLossError):
            train_classifier(
                model, separable["train"], TrainSchedule(epochs=5, initial_lr=1e9), seed=0
            )


def test_write_metrics_csv(tmp_path):
    rows = [{"epoch": 0, "loss": 1.5}, {"epoch": 1, "loss": 0.7}]
    path = write_metrics_csv(tmp_path / "m.csv", rows)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,loss"
    assert len(lines) == 3
