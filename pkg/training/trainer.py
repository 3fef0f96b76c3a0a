"""
SGD training of the saliency network.

Targets are the GT logits area-downsampled to the response resolution and
passed through the softmax. The batch loss is the mean per-image loss.
"""

from typing import List, Optional, Sequence, Tuple

import click
import numpy as np

from core import PixelDistribution
from data import Sample
from errors import InvalidInputError, TrainingDivergedError
from instrumentation import MetricsTimer, record_iteration, train_step_seconds
from losses import evaluate_logits
from metrics import aggregate, cc, evaluate_batch
from models import MetricReport, TrainConfig
from net import FcnModel, ParamGrads, forward, forward_backward, predict
from pipeline import gt_logits_from_distribution, training_target
from settings import VERBOSE
from training.events import (
    EpochEvaluated,
    IterationCompleted,
    SnapshotTaken,
    TrainingAborted,
    TrainingEvent,
)
from training.train_log import TrainLog

# Per conv layer: (weight velocity, bias velocity); None elsewhere
MomentumBuffers = List[Optional[Tuple[np.ndarray, np.ndarray]]]


def init_momentum(model: FcnModel) -> MomentumBuffers:
    return [
        None if w is None else (np.zeros_like(w), np.zeros_like(b))
        for w, b in zip(model.weights, model.biases)
    ]


def sgd_step(
    model: FcnModel, grads: ParamGrads, config: TrainConfig, buffers: MomentumBuffers
) -> FcnModel:
    """
    In-place momentum SGD with weight decay:
    v <- momentum * v + lr_layer * (grad + weight_decay * w);  w <- w - v.

    Layers before config.frozen_prefix and layers without gradients are untouched.
    """
    for index in model.conv_indices():
        if index < config.frozen_prefix or grads[index] is None:
            continue
        lr = config.base_lr * model.layers[index].lr_multiplier
        params = (model.weights[index], model.biases[index])
        for param, grad, velocity in zip(params, grads[index], buffers[index]):
            velocity[...] = config.momentum * velocity + lr * (grad + config.weight_decay * param)
            param -= velocity
    return model


def prepare_targets(model: FcnModel, samples: Sequence[Sample]) -> List[PixelDistribution]:
    """GT distributions at the response resolution of the model"""
    d = model.downsample_factor
    targets = []
    for sample in samples:
        _, height, width = sample.image.shape
        x_g = gt_logits_from_distribution(sample.gt)
        targets.append(training_target(x_g, height // d, width // d))
    return targets


def evaluate_model(
    model: FcnModel,
    samples: Sequence[Sample],
    n_splits: int = 10,
    n_neg: Optional[int] = None,
    seed: int = 0,
    emd_grid: Optional[int] = None,
    jobs: int = 1,
) -> List[MetricReport]:
    """Metrics of the model's predictions; each image's sAUC bank is the other images"""
    predictions = [predict(model, s.image) for s in samples]
    return evaluate_batch(
        [p.values for p in predictions],
        [s.fixations for s in samples],
        gts=[s.gt for s in samples],
        n_splits=n_splits,
        n_neg=n_neg,
        seed=seed,
        emd_grid=emd_grid,
        jobs=jobs,
    )


def _log_event(event: TrainingEvent, verbose: bool) -> None:
    """One summary line per event on stderr"""
    if not verbose:
        return
    summary = f"[{event.event_type.value}] epoch={event.epoch} iter={event.iteration}"
    if isinstance(event, IterationCompleted):
        summary += f" loss={event.loss:.6g}"
    elif isinstance(event, EpochEvaluated):
        summary += f" train_loss={event.train_loss:.6g}"
        summary += "".join(f" {k}={v:.4f}" for k, v in event.metrics.items())
    elif isinstance(event, SnapshotTaken):
        summary += f" probe_cc={event.cc}"
    elif isinstance(event, TrainingAborted):
        summary += f" reason={event.reason}"
    click.echo(summary, err=True)


def _snapshot(model: FcnModel, probe: Sample, epoch: int, iteration: int) -> SnapshotTaken:
    response = forward(model, probe.image)
    p = predict(model, probe.image)
    try:
        probe_cc = cc(p.values, probe.gt.values)
    except InvalidInputError:
        probe_cc = None
    return SnapshotTaken(
        epoch=epoch, iteration=iteration, cc=probe_cc, response=response.tolist()
    )


def train(
    model: FcnModel,
    samples: Sequence[Sample],
    config: TrainConfig,
    val_samples: Optional[Sequence[Sample]] = None,
    log: Optional[TrainLog] = None,
    verbose: Optional[bool] = None,
) -> Tuple[FcnModel, TrainLog]:
    """
    Shuffled mini-batch SGD on a copy of model.

    Logs every iteration and every epoch; epochs carry validation metric
    means when val_samples is given. Snapshots of the first validation (or
    training) image are logged every config.snapshot_every iterations.

    Raises:
        InvalidInputError: If samples is empty
        TrainingDivergedError: If the loss or a gradient becomes non-finite
    """
    if not samples:
        raise InvalidInputError("Training needs at least one sample")
    verbose = VERBOSE if verbose is None else verbose
    log = TrainLog() if log is None else log
    model = model.copy()
    if config.epochs == 0:
        return model, log

    targets = prepare_targets(model, samples)
    buffers = init_momentum(model)
    rng = np.random.default_rng(config.seed)
    probe = (val_samples or samples)[0]
    loss_name = config.loss.kind.value
    iteration = 0

    def record(event: TrainingEvent) -> None:
        log.append_event(event)
        _log_event(event, verbose)

    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            with MetricsTimer(train_step_seconds):
                batch_loss, grads = _batch_gradients(model, samples, targets, batch, config)
                if not np.isfinite(batch_loss) or not _all_finite(grads):
                    record(
                        TrainingAborted(
                            epoch=epoch,
                            iteration=iteration,
                            reason=f"non-finite loss or gradient (loss={batch_loss})",
                        )
                    )
                    raise TrainingDivergedError(
                        f"Training diverged at epoch {epoch}, iteration {iteration + 1}"
                    )
                sgd_step(model, grads, config, buffers)

            iteration += 1
            epoch_losses.append(batch_loss)
            record_iteration(loss_name, batch_loss)
            record(
                IterationCompleted(
                    epoch=epoch, iteration=iteration, loss=batch_loss, batch_size=len(batch)
                )
            )
            if config.snapshot_every and iteration % config.snapshot_every == 0:
                record(_snapshot(model, probe, epoch, iteration))

        metrics = {}
        if val_samples:
            reports = evaluate_model(model, val_samples, n_splits=config.eval_splits, seed=config.seed)
            metrics = aggregate(reports)
        record(
            EpochEvaluated(
                epoch=epoch,
                iteration=iteration,
                train_loss=float(np.mean(epoch_losses)),
                metrics=metrics,
            )
        )

    return model, log


def _batch_gradients(
    model: FcnModel,
    samples: Sequence[Sample],
    targets: Sequence[PixelDistribution],
    batch: np.ndarray,
    config: TrainConfig,
) -> Tuple[float, ParamGrads]:
    """Mean loss and mean parameter gradients over one mini-batch"""
    scale = 1.0 / len(batch)
    total_loss = 0.0
    total: ParamGrads = [None] * len(model.layers)

    for index in batch:
        target = targets[index]

        def grad_fn(response):
            if not np.all(np.isfinite(response)):
                return np.zeros_like(response), float("nan")
            result = evaluate_logits(config.loss, response, target)
            return result.grad_logits * scale, result.value

        _, grads, value = forward_backward(
            model, samples[index].image, grad_fn, frozen_prefix=config.frozen_prefix
        )
        total_loss += value * scale
        for layer, grad in enumerate(grads):
            if grad is None:
                continue
            if total[layer] is None:
                total[layer] = grad
            else:
                total[layer] = (total[layer][0] + grad[0], total[layer][1] + grad[1])
    return float(total_loss), total


def _all_finite(grads: ParamGrads) -> bool:
    return all(
        np.all(np.isfinite(g[0])) and np.all(np.isfinite(g[1])) for g in grads if g is not None
    )
