"""
Saliency evaluation metrics.

Definitions follow the MIT saliency benchmark conventions:

- AUC-Judd: thresholds are the saliency values at fixated pixels; at
  threshold t a pixel counts as positive when its value is >= t. TPR is the
  fraction of fixated pixels at or above t, FPR the fraction of all pixels
  at or above t; the curve is closed with (0, 0) and (1, 1) and integrated
  with the trapezoidal rule.
- AUC-Borji / sAUC: per split, negatives are sampled (uniformly over the
  image, or from other images' fixations for sAUC); the AUC of fixated
  versus negative values is computed exactly from average ranks, so ties
  count 1/2; the mean over splits is returned.
- NSS: map standardized with the sample standard deviation (N - 1).
- CC: Pearson correlation. SIM: histogram intersection.
- EMD: exact optimal transport with Euclidean ground distance between
  pixel centers, after area-downsampling large maps.

Fixated pixels are the unique fixated pixels (binary fixation map).
"""

from concurrent import futures
from typing import Callable, List, Optional, Sequence

import numpy as np
import ot
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import linprog
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from core import FixationSet, GridMap, PixelDistribution, area_resize, as_grid, check_same_shape
from errors import (
    EmptyFixationsError,
    InvalidInputError,
    SaliencyError,
    UndefinedMetricError,
)
from instrumentation import metric_evaluations_total
from models import METRIC_NAMES, MetricReport

DEFAULT_SPLITS = 100
DEFAULT_EMD_GRID = 32
BRUTEFORCE_MAX_CELLS = 16


class ShuffleBank(BaseModel):
    """Fixations pooled from other images, used as sAUC negatives"""

    model_config = ConfigDict(frozen=True)

    fixation_sets: List[FixationSet] = Field(default_factory=list)
    seed: int = 0

    @classmethod
    def excluding(
        cls,
        fixation_sets: Sequence[FixationSet],
        index: int,
        seed: int = 0,
        extra: Sequence[FixationSet] = (),
    ) -> "ShuffleBank":
        """Bank of every set except the image under evaluation, plus extra"""
        others = [fix for i, fix in enumerate(fixation_sets) if i != index]
        return cls(fixation_sets=others + list(extra), seed=seed)

    def flat_indices(self, height: int, width: int) -> np.ndarray:
        """Bank locations as flat indices on a height x width grid"""
        chunks = []
        for fix in self.fixation_sets:
            rows, cols = fix.rows_cols()
            if fix.shape != (height, width):
                # Rescale coordinates of differently sized images
                rows = rows * height // fix.image_height
                cols = cols * width // fix.image_width
            chunks.append(rows * width + cols)
        if not chunks:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(chunks)


def image_seed(seed: int, index: int) -> int:
    """Per-image substream seed so batch and parallel runs agree"""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _fixated_values(sal: GridMap, fix: FixationSet) -> np.ndarray:
    sal = as_grid(sal, "saliency map")
    if sal.shape != fix.shape:
        raise InvalidInputError(
            f"Saliency map {sal.shape} does not match fixation bounds {fix.shape}"
        )
    indices = fix.unique_flat_indices()
    if indices.size == 0:
        raise EmptyFixationsError("Fixation set is empty")
    return sal.ravel()[indices]


def pairwise_auc(positives: np.ndarray, negatives: np.ndarray) -> float:
    """P(pos > neg) + P(pos == neg) / 2, from average ranks"""
    n_pos, n_neg = positives.size, negatives.size
    ranks = rankdata(np.concatenate([positives, negatives]), method="average")
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_judd(sal: GridMap, fix: FixationSet) -> float:
    fixated = _fixated_values(sal, fix)
    values = np.sort(np.ravel(sal))
    fixated = np.sort(fixated)
    thresholds = np.unique(fixated)[::-1]

    # Counts of values >= t
    tp = (fixated.size - np.searchsorted(fixated, thresholds, side="left")) / fixated.size
    fp = (values.size - np.searchsorted(values, thresholds, side="left")) / values.size

    tpr = np.concatenate([[0.0], tp, [1.0]])
    fpr = np.concatenate([[0.0], fp, [1.0]])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def auc_borji(
    sal: GridMap,
    fix: FixationSet,
    n_splits: int = DEFAULT_SPLITS,
    n_neg: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    AUC against negatives sampled uniformly (with replacement) over the image.

    Args:
        n_neg: Negatives per split; defaults to the number of fixated pixels
    """
    if n_splits < 1:
        raise InvalidInputError("n_splits must be >= 1")
    positives = _fixated_values(sal, fix)
    n_neg = positives.size if n_neg is None else n_neg
    if n_neg < 1:
        raise InvalidInputError("n_neg must be >= 1")

    values = np.ravel(sal)
    rng = np.random.default_rng(seed)
    scores = []
    for _ in range(n_splits):
        negatives = values[rng.integers(0, values.size, size=n_neg)]
        scores.append(pairwise_auc(positives, negatives))
    return float(np.mean(scores))


def sauc(
    sal: GridMap,
    fix: FixationSet,
    bank: ShuffleBank,
    n_splits: int = DEFAULT_SPLITS,
    seed: Optional[int] = None,
    n_neg: Optional[int] = None,
) -> float:
    """
    Shuffled AUC: negatives are other images' fixation locations.

    Each split draws min(n_neg, bank size) bank locations without
    replacement; n_neg defaults to the number of fixated pixels.
    """
    if n_splits < 1:
        raise InvalidInputError("n_splits must be >= 1")
    positives = _fixated_values(sal, fix)
    height, width = fix.shape
    locations = bank.flat_indices(height, width)
    if locations.size == 0:
        raise EmptyFixationsError("Shuffle bank is empty")

    n_neg = positives.size if n_neg is None else n_neg
    take = min(n_neg, locations.size)
    values = np.ravel(sal)
    rng = np.random.default_rng(bank.seed if seed is None else seed)
    scores = []
    for _ in range(n_splits):
        chosen = locations[rng.choice(locations.size, size=take, replace=False)]
        scores.append(pairwise_auc(positives, values[chosen]))
    return float(np.mean(scores))


def cc(sal: GridMap, gt: GridMap) -> float:
    a = as_grid(sal, "saliency map")
    b = as_grid(gt, "ground truth")
    check_same_shape(a, b, "saliency map and ground truth")
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if denom == 0:
        raise UndefinedMetricError("CC is undefined for a constant map")
    return float(np.clip(np.sum(a * b) / denom, -1.0, 1.0))


def nss(sal: GridMap, fix: FixationSet) -> float:
    sal = as_grid(sal, "saliency map")
    if sal.max() == sal.min():
        raise UndefinedMetricError("NSS is undefined for a constant map")
    fixated = _fixated_values(sal, fix)
    return float(np.mean((fixated - sal.mean()) / sal.std(ddof=1)))


def sim(p: PixelDistribution, g: PixelDistribution) -> float:
    check_same_shape(p.values, g.values, "distributions")
    return float(np.sum(np.minimum(p.values, g.values)))


def _ground_distances(height: int, width: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    centers = np.column_stack([rows.ravel(), cols.ravel()]).astype(np.float64)
    return cdist(centers, centers)


def emd(p: PixelDistribution, g: PixelDistribution, grid_limit: int = DEFAULT_EMD_GRID) -> float:
    """
    Exact earth mover's distance in pixels of the solve grid.

    Maps larger than grid_limit**2 pixels are area-downsampled so that no
    side exceeds grid_limit, then renormalized.
    """
    check_same_shape(p.values, g.values, "distributions")
    if grid_limit < 1:
        raise InvalidInputError("grid_limit must be >= 1")
    a, b = p.values, g.values
    height, width = a.shape
    if height * width > grid_limit**2:
        height, width = min(height, grid_limit), min(width, grid_limit)
        a = area_resize(a, height, width)
        b = area_resize(b, height, width)
    a = np.ascontiguousarray(a.ravel() / a.sum())
    b = np.ascontiguousarray(b.ravel() / b.sum())
    cost = _ground_distances(height, width)
    return float(max(ot.emd2(a, b, cost, numItermax=1_000_000), 0.0))


def emd_bruteforce(p: PixelDistribution, g: PixelDistribution) -> float:
    """
    Reference EMD: the dense transportation LP solved by dual simplex.

    Raises:
        InvalidInputError: If the grid has more than 16 cells
    """
    check_same_shape(p.values, g.values, "distributions")
    height, width = p.shape
    n = height * width
    if n > BRUTEFORCE_MAX_CELLS:
        raise InvalidInputError(
            f"Brute-force EMD supports at most {BRUTEFORCE_MAX_CELLS} cells, got {n}"
        )

    cost = _ground_distances(height, width)
    # Plan variable T[i, j] flattened row-major: supply rows then demand columns.
    a_eq = np.zeros((2 * n, n * n))
    for i in range(n):
        a_eq[i, i * n : (i + 1) * n] = 1.0
        a_eq[n + i, i::n] = 1.0
    b_eq = np.concatenate([p.values.ravel(), g.values.ravel()])

    result = linprog(
        cost.ravel(),
        A_eq=a_eq,
        b_eq=b_eq,
        bounds=(0, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if result.status != 0:
        raise SaliencyError(f"Transportation LP failed: {result.message}")
    return float(max(result.fun, 0.0))


def _unless_undefined(metric: Callable, *args) -> Optional[float]:
    try:
        return metric(*args)
    except UndefinedMetricError:
        return None


def evaluate_map(
    sal: GridMap,
    fix: FixationSet,
    gt: Optional[PixelDistribution] = None,
    bank: Optional[ShuffleBank] = None,
    n_splits: int = DEFAULT_SPLITS,
    n_neg: Optional[int] = None,
    seed: int = 0,
    emd_grid: Optional[int] = DEFAULT_EMD_GRID,
    image: Optional[str] = None,
) -> MetricReport:
    """
    Every metric that the inputs allow, for one image.

    sAUC needs a bank, CC/SIM/EMD need a ground-truth distribution and
    EMD is skipped when emd_grid is None. CC and NSS are left empty when
    undefined for the map (constant input).
    """
    sal = as_grid(sal, "saliency map")
    report = {
        "image": image,
        "n_splits": n_splits,
        "n_neg": n_neg,
        "seed": seed,
        "emd_grid": emd_grid,
    }

    report["auc_judd"] = auc_judd(sal, fix)
    report["auc_borji"] = auc_borji(sal, fix, n_splits=n_splits, n_neg=n_neg, seed=seed)
    report["nss"] = _unless_undefined(nss, sal, fix)
    if bank is not None:
        report["sauc"] = sauc(sal, fix, bank, n_splits=n_splits, seed=seed, n_neg=n_neg)

    if gt is not None:
        p = PixelDistribution.from_map(sal)
        report["cc"] = _unless_undefined(cc, sal, gt.values)
        report["sim"] = sim(p, gt)
        if emd_grid is not None:
            report["emd"] = emd(p, gt, grid_limit=emd_grid)

    for name in METRIC_NAMES:
        if report.get(name) is not None:
            metric_evaluations_total.labels(metric=name).inc()

    return MetricReport(**report)


def evaluate_batch(
    maps: Sequence[GridMap],
    fixations: Sequence[FixationSet],
    gts: Optional[Sequence[Optional[PixelDistribution]]] = None,
    n_splits: int = DEFAULT_SPLITS,
    n_neg: Optional[int] = None,
    seed: int = 0,
    emd_grid: Optional[int] = DEFAULT_EMD_GRID,
    names: Optional[Sequence[str]] = None,
    jobs: int = 1,
    extra_bank: Sequence[FixationSet] = (),
) -> List[MetricReport]:
    """
    Evaluate many images; each image's bank is the other images' fixations
    plus extra_bank.

    Stochastic metrics use per-image substreams of seed, so results are
    identical for any number of jobs. Reports echo seed itself.
    """
    if len(maps) != len(fixations):
        raise InvalidInputError("maps and fixations differ in length")
    gts = gts if gts is not None else [None] * len(maps)
    use_bank = len(fixations) > 1 or len(extra_bank) > 0

    def evaluate_one(index: int) -> MetricReport:
        bank = None
        if use_bank:
            bank = ShuffleBank.excluding(
                fixations, index, seed=image_seed(seed, index), extra=extra_bank
            )
        report = evaluate_map(
            maps[index],
            fixations[index],
            gt=gts[index],
            bank=bank,
            n_splits=n_splits,
            n_neg=n_neg,
            seed=image_seed(seed, index),
            emd_grid=emd_grid,
            image=names[index] if names is not None else str(index),
        )
        return report.model_copy(update={"seed": seed})

    return _map_ordered(evaluate_one, range(len(maps)), jobs)


def _map_ordered(fn: Callable, items, jobs: int) -> list:
    if jobs <= 1:
        return [fn(item) for item in items]
    with futures.ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def aggregate(reports: Sequence[MetricReport]) -> dict:
    """Mean of every metric present in at least one report"""
    means = {}
    for name in METRIC_NAMES:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if values:
            means[name] = float(np.mean(values))
    return means
