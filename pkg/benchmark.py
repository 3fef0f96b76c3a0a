"""
Loss comparison: train the same network with each loss and compare
validation metrics, per seed and per train/validation split.
"""

from concurrent import futures
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel
from scipy.stats import rankdata

from data import Sample, fixed_split, random_splits
from errors import InvalidInputError
from models import METRIC_NAMES, LossBenchRow, LossKind, LossSpec, TrainConfig
from net import FcnModel, default_layers
from training.replay import best_epoch
from training.trainer import train

REGRESSION_LOSSES = (LossKind.euclidean, LossKind.huber)
# Lower is better
DESCENDING_METRICS = ("emd",)


class DirectionalResult(BaseModel):
    """Ordering checks on seed-averaged validation metrics"""

    metric: str
    bhattacharyya: Optional[float] = None
    euclidean: Optional[float] = None
    bhattacharyya_not_worse: Optional[bool] = None
    distance_mean_rank: Optional[float] = None
    regression_mean_rank: Optional[float] = None
    distances_rank_better: Optional[bool] = None


def _run_one(
    kind: LossKind,
    seed: int,
    split: int,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    config: TrainConfig,
    verbose: bool,
) -> List[LossBenchRow]:
    run_config = config.model_copy(update={"loss": LossSpec(kind=kind), "seed": seed})
    channels = train_samples[0].image.shape[0]
    model = FcnModel.initialize(default_layers(channels), seed=seed)
    _, log = train(model, train_samples, run_config, val_samples=val_samples, verbose=verbose)

    def row(selection: str, event) -> LossBenchRow:
        return LossBenchRow(
            loss=kind,
            seed=seed,
            split=split,
            selection=selection,
            epoch=event.epoch,
            train_loss=event.train_loss,
            **{m: event.metrics.get(m) for m in METRIC_NAMES},
        )

    epochs = log.epochs()
    if not epochs:
        return []
    rows = [row("epoch", e) for e in epochs]
    rows.append(row("final", epochs[-1]))
    best = best_epoch(log)
    if best is not None:
        rows.append(row("best", best))
    return rows


def run_lossbench(
    samples: Sequence[Sample],
    losses: Sequence[LossKind],
    seeds: Sequence[int],
    config: TrainConfig,
    n_val: int,
    n_splits: int = 1,
    split_seed: int = 0,
    jobs: int = 1,
    verbose: bool = False,
) -> List[LossBenchRow]:
    """
    Train one model per (split, seed, loss).

    With n_splits == 1 the trailing n_val samples validate; otherwise
    n_splits random partitions are drawn from split_seed. Rows come back in
    (split, seed, loss) order whatever the number of jobs.
    """
    if not losses or not seeds:
        raise InvalidInputError("lossbench needs at least one loss and one seed")
    if n_splits < 1:
        raise InvalidInputError("n_splits must be >= 1")
    if n_splits == 1:
        partitions = [fixed_split(len(samples), n_val)]
    else:
        partitions = random_splits(len(samples), n_val, n_splits, seed=split_seed)

    runs = []
    for split, (train_idx, val_idx) in enumerate(partitions):
        train_samples = [samples[i] for i in train_idx]
        val_samples = [samples[i] for i in val_idx]
        for seed in seeds:
            for kind in losses:
                runs.append((kind, seed, split, train_samples, val_samples))

    def run(args) -> List[LossBenchRow]:
        kind, seed, split, train_samples, val_samples = args
        return _run_one(kind, seed, split, train_samples, val_samples, config, verbose)

    if jobs <= 1:
        results = [run(args) for args in runs]
    else:
        with futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, runs))
    return [row for rows in results for row in rows]


def summarize(rows: Sequence[LossBenchRow], selection: str = "final") -> Dict[LossKind, Dict[str, float]]:
    """Per-loss metric means over seeds and splits for one selection"""
    summary: Dict[LossKind, Dict[str, float]] = {}
    for kind in dict.fromkeys(r.loss for r in rows):
        chosen = [r for r in rows if r.loss == kind and r.selection == selection]
        means = {}
        for metric in METRIC_NAMES:
            values = [getattr(r, metric) for r in chosen if getattr(r, metric) is not None]
            if values:
                means[metric] = float(np.mean(values))
        summary[kind] = means
    return summary


def rank_losses(summary: Dict[LossKind, Dict[str, float]], metric: str) -> Dict[LossKind, float]:
    """Rank of each loss on one metric, 1 = best; ties share the average rank"""
    kinds = [k for k in summary if metric in summary[k]]
    if not kinds:
        return {}
    values = np.array([summary[k][metric] for k in kinds])
    if metric not in DESCENDING_METRICS:
        values = -values
    return dict(zip(kinds, rankdata(values, method="average").tolist()))


def directional_check(
    summary: Dict[LossKind, Dict[str, float]], metrics: Sequence[str] = ("cc", "sauc")
) -> List[DirectionalResult]:
    """
    Bhattacharyya not worse than Euclidean, and the probability distances
    ranking better on average than the regression losses.
    """
    results = []
    for metric in metrics:
        result = DirectionalResult(metric=metric)
        bhat = summary.get(LossKind.bhattacharyya, {}).get(metric)
        euc = summary.get(LossKind.euclidean, {}).get(metric)
        result.bhattacharyya, result.euclidean = bhat, euc
        if bhat is not None and euc is not None:
            result.bhattacharyya_not_worse = bhat >= euc

        ranks = rank_losses(summary, metric)
        distance = [r for k, r in ranks.items() if k.is_distribution_distance]
        regression = [r for k, r in ranks.items() if k in REGRESSION_LOSSES]
        if distance and regression:
            result.distance_mean_rank = float(np.mean(distance))
            result.regression_mean_rank = float(np.mean(regression))
            result.distances_rank_better = result.distance_mean_rank < result.regression_mean_rank
        results.append(result)
    return results
