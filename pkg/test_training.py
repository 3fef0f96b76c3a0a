import numpy as np
import pytest
from numpy.testing import assert_array_equal

from data import generate
from errors import FormatError, InvalidInputError, TrainingDivergedError
from metrics import cc
from models import GtParams, LayerKind, LayerSpec, LossKind, LossSpec, SynthConfig, TrainConfig
from net import FcnModel, default_layers, predict
from training.events import EpochEvaluated, IterationCompleted, SnapshotTaken, TrainingAborted
from training.replay import best_epoch, metric_curves
from training.train_log import TrainLog
from training.trainer import init_momentum, prepare_targets, sgd_step, train

SMALL_GT = GtParams(kernel_width=7, sigma=1.5)


def synth(n_images=4, size=16, seed=0):
    return generate(
        SynthConfig(n_images=n_images, height=size, width=size, fixations_per_image=20, seed=seed, gt=SMALL_GT)
    )


def scalar_model(weight=1.0, lr_multiplier=1.0):
    spec = LayerSpec(kind=LayerKind.conv, in_channels=1, out_channels=1, kernel_size=1, lr_multiplier=lr_multiplier)
    return FcnModel(layers=[spec], weights=[np.full((1, 1, 1, 1), weight)], biases=[np.zeros(1)])


def scalar_grads(value):
    return [(np.full((1, 1, 1, 1), value), np.zeros(1))]


class TestSgdStep:
    def test_zero_gradient_without_decay_is_noop(self):
        model = scalar_model(0.7)
        config = TrainConfig(weight_decay=0.0)
        sgd_step(model, scalar_grads(0.0), config, init_momentum(model))
        assert model.weights[0][0, 0, 0, 0] == 0.7

    def test_single_step(self):
        model = scalar_model(1.0)
        config = TrainConfig(base_lr=0.1, momentum=0.0, weight_decay=0.0)
        sgd_step(model, scalar_grads(1.0), config, init_momentum(model))
        assert model.weights[0][0, 0, 0, 0] == pytest.approx(0.9, abs=1e-15)

    def test_two_momentum_steps_match_recursion(self):
        lr, momentum, decay = 0.05, 0.9, 0.0005
        model = scalar_model(1.0)
        config = TrainConfig(base_lr=lr, momentum=momentum, weight_decay=decay)
        buffers = init_momentum(model)

        w, v = 1.0, 0.0
        for grad in (0.3, -0.2):
            sgd_step(model, scalar_grads(grad), config, buffers)
            v = momentum * v + lr * (grad + decay * w)
            w = w - v
        assert model.weights[0][0, 0, 0, 0] == pytest.approx(w, abs=1e-12)
        assert buffers[0][0][0, 0, 0, 0] == pytest.approx(v, abs=1e-12)

    def test_lr_multiplier_scales_step(self):
        model = scalar_model(1.0, lr_multiplier=0.1)
        config = TrainConfig(base_lr=1.0, momentum=0.0, weight_decay=0.0)
        sgd_step(model, scalar_grads(1.0), config, init_momentum(model))
        assert model.weights[0][0, 0, 0, 0] == pytest.approx(0.9, abs=1e-15)

    def test_frozen_layer_untouched(self):
        model = scalar_model(1.0)
        config = TrainConfig(frozen_prefix=1)
        sgd_step(model, scalar_grads(5.0), config, init_momentum(model))
        assert model.weights[0][0, 0, 0, 0] == 1.0


class TestTrain:
    @pytest.fixture(scope="class")
    def samples(self):
        return synth()

    def test_targets_at_response_resolution(self, samples):
        model = FcnModel.initialize(default_layers())
        targets = prepare_targets(model, samples)
        assert all(t.shape == (4, 4) for t in targets)

    def test_zero_epochs_leave_model_unchanged(self, samples):
        model = FcnModel.initialize(default_layers(), seed=1)
        trained, log = train(model, samples, TrainConfig(epochs=0))
        assert len(log) == 0
        for a, b in zip(trained.weights, model.weights):
            if a is not None:
                assert_array_equal(a, b)

    def test_logs_every_iteration_and_epoch(self, samples):
        model = FcnModel.initialize(default_layers())
        _, log = train(model, samples, TrainConfig(epochs=2, batch_size=3), verbose=False)
        # 4 samples in batches of 3: two iterations per epoch
        assert len(log.iterations()) == 4
        assert [e.epoch for e in log.epochs()] == [0, 1]
        assert [e.sequence_number for e in log.events] == list(range(1, len(log) + 1))
        assert log.iterations()[-1].batch_size == 1

    def test_does_not_modify_input_model(self, samples):
        model = FcnModel.initialize(default_layers(), seed=2)
        before = [w.copy() for w in model.weights if w is not None]
        train(model, samples, TrainConfig(epochs=1, batch_size=2), verbose=False)
        after = [w for w in model.weights if w is not None]
        for a, b in zip(before, after):
            assert_array_equal(a, b)

    def test_deterministic(self, samples):
        config = TrainConfig(epochs=2, batch_size=2, seed=5)
        runs = [
            train(FcnModel.initialize(default_layers(), seed=5), samples, config, verbose=False)
            for _ in range(2)
        ]
        assert [e.model_dump() for e in runs[0][1].events] == [e.model_dump() for e in runs[1][1].events]
        for a, b in zip(runs[0][0].weights, runs[1][0].weights):
            if a is not None:
                assert_array_equal(a, b)

    def test_frozen_prefix_is_bit_identical(self, samples):
        model = FcnModel.initialize(default_layers(), seed=3)
        trained, _ = train(model, samples, TrainConfig(epochs=2, batch_size=2, frozen_prefix=4), verbose=False)
        assert_array_equal(trained.weights[0], model.weights[0])
        assert_array_equal(trained.biases[0], model.biases[0])
        assert_array_equal(trained.weights[3], model.weights[3])
        assert not np.array_equal(trained.weights[6], model.weights[6])

    def test_lr_multiplier_semantics(self, samples):
        k = 2.0
        layers = default_layers()
        scaled = [
            s.model_copy(update={"lr_multiplier": s.lr_multiplier / k}) if s.kind == LayerKind.conv else s
            for s in layers
        ]
        base = FcnModel.initialize(layers, seed=4)
        other = FcnModel(layers=scaled, weights=base.weights, biases=base.biases)

        config = TrainConfig(epochs=1, batch_size=2, base_lr=0.1)
        first, _ = train(base, samples, config, verbose=False)
        second, _ = train(other, samples, config.model_copy(update={"base_lr": 0.1 * k}), verbose=False)
        for a, b in zip(first.weights, second.weights):
            if a is not None:
                assert_array_equal(a, b)

    def test_validation_metrics_per_epoch(self, samples):
        model = FcnModel.initialize(default_layers())
        _, log = train(
            model, samples[:2], TrainConfig(epochs=1, eval_splits=2), val_samples=samples[2:], verbose=False
        )
        (epoch,) = log.epochs()
        assert {"auc_judd", "auc_borji", "sauc", "cc", "nss", "sim"} <= set(epoch.metrics)

    def test_snapshots(self, samples):
        model = FcnModel.initialize(default_layers())
        _, log = train(model, samples, TrainConfig(epochs=1, batch_size=1, snapshot_every=2), verbose=False)
        snapshots = [e for e in log.events if isinstance(e, SnapshotTaken)]
        assert [s.iteration for s in snapshots] == [2, 4]
        assert np.asarray(snapshots[0].response).shape == (4, 4)

    def test_divergence_aborts(self, samples):
        model = FcnModel.initialize(default_layers())
        for index in model.conv_indices():
            model.weights[index][...] = 1e300
        log = TrainLog()
        with pytest.raises(TrainingDivergedError):
            train(model, samples, TrainConfig(epochs=1), log=log, verbose=False)
        assert isinstance(log.events[-1], TrainingAborted)

    def test_empty_dataset(self):
        with pytest.raises(InvalidInputError):
            train(FcnModel.initialize(default_layers()), [], TrainConfig())

    def test_loss_decreases(self, samples):
        model = FcnModel.initialize(default_layers())
        _, log = train(model, samples[:1], TrainConfig(epochs=60, batch_size=1), verbose=False)
        curve = log.loss_curve()
        assert np.mean(curve[-5:]) < np.mean(curve[:5])


@pytest.mark.slow
@pytest.mark.parametrize("kind", [LossKind.bhattacharyya, LossKind.kl])
def test_overfits_single_sample(kind):
    (sample,) = synth(n_images=1, size=32, seed=7)
    model = FcnModel.initialize(default_layers(), seed=0)
    trained, _ = train(
        model, [sample], TrainConfig(epochs=500, batch_size=1, loss=LossSpec(kind=kind)), verbose=False
    )
    assert cc(predict(trained, sample.image).values, sample.gt.values) > 0.9


@pytest.mark.slow
def test_localizes_blobs_on_held_out_images():
    samples = generate(
        SynthConfig(
            n_images=120, height=32, width=32, blobs_min=1, blobs_max=1,
            center_bias_weight=0.0, fixations_per_image=30, seed=11, gt=SMALL_GT,
        )
    )
    train_set, held_out = samples[:100], samples[100:]
    model = FcnModel.initialize(default_layers(), seed=0)
    trained, _ = train(model, train_set, TrainConfig(epochs=20, batch_size=4), verbose=False)

    hits = 0
    for sample in held_out:
        (blob,) = sample.blobs
        row, col = np.unravel_index(np.argmax(predict(trained, sample.image).values), (32, 32))
        hits += int(np.hypot(row - blob.row, col - blob.col) <= 2 * blob.sigma)
    assert hits >= 0.8 * len(held_out)


class TestTrainLog:
    def make_log(self, metric_rows):
        log = TrainLog()
        for epoch, metrics in enumerate(metric_rows):
            log.append_event(IterationCompleted(epoch=epoch, iteration=epoch + 1, loss=1.0 / (epoch + 1), batch_size=1))
            log.append_event(EpochEvaluated(epoch=epoch, iteration=epoch + 1, train_loss=1.0, metrics=metrics))
        return log

    def test_jsonl_round_trip(self, tmp_path):
        log = self.make_log([{"cc": 0.5}, {"cc": 0.6}])
        log.append_event(SnapshotTaken(epoch=1, iteration=2, cc=0.4, response=[[0.0, 1.0]]))
        path = tmp_path / "train.jsonl"
        log.write_jsonl(path)
        loaded = TrainLog.read_jsonl(path)
        assert [e.model_dump() for e in loaded.events] == [e.model_dump() for e in log.events]
        assert loaded.loss_curve() == [1.0, 0.5]

    def test_invalid_line(self, tmp_path):
        path = tmp_path / "train.jsonl"
        path.write_text('{"event_type": "unknown"}\n')
        with pytest.raises(FormatError):
            TrainLog.read_jsonl(path)

    def test_best_epoch_by_rank_sum(self):
        rows = [
            {"auc_judd": 0.80, "sauc": 0.60, "cc": 0.50, "nss": 1.0},
            {"auc_judd": 0.85, "sauc": 0.65, "cc": 0.55, "nss": 1.2},
            {"auc_judd": 0.84, "sauc": 0.66, "cc": 0.54, "nss": 1.1},
        ]
        assert best_epoch(self.make_log(rows)).epoch == 1

    def test_best_epoch_ties_go_to_earliest(self):
        rows = [{"cc": 0.5}, {"cc": 0.5}]
        assert best_epoch(self.make_log(rows), metrics=("cc",)).epoch == 0

    def test_best_epoch_without_metrics(self):
        assert best_epoch(self.make_log([{}, {}])) is None

    def test_metric_curves(self):
        curves = metric_curves(self.make_log([{"cc": 0.1}, {"cc": 0.2}]))
        assert [row["cc"] for row in curves] == [0.1, 0.2]
        assert curves[1]["iteration"] == 2
