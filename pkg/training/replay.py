"""
Replay a TrainLog to pick the best epoch and rebuild metric curves.
"""

from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from models import SELECTION_METRICS
from training.events import EpochEvaluated
from training.train_log import TrainLog


def best_epoch(
    log: TrainLog, metrics: Sequence[str] = SELECTION_METRICS
) -> Optional[EpochEvaluated]:
    """
    Epoch with the best overall validation performance.

    Each metric ranks the epochs (1 = highest value); the smallest rank sum
    wins and ties go to the earliest epoch. Epochs missing any of the
    metrics are not candidates; None when no epoch qualifies.
    """
    candidates = [e for e in log.epochs() if all(m in e.metrics for m in metrics)]
    if not candidates:
        return None

    rank_sum = np.zeros(len(candidates))
    for metric in metrics:
        values = np.array([e.metrics[metric] for e in candidates])
        rank_sum += rankdata(-values, method="min")
    # argmin returns the first minimum
    return candidates[int(np.argmin(rank_sum))]


def metric_curves(log: TrainLog) -> List[Dict[str, float]]:
    """One row per epoch: epoch, iteration, train_loss and every metric mean"""
    return [
        {"epoch": e.epoch, "iteration": e.iteration, "train_loss": e.train_loss, **e.metrics}
        for e in log.epochs()
    ]
