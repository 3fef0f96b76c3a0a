"""
Ground-truth construction, resolution alignment and post-processing.

GT path: fixations -> binary map -> Gaussian smoothing (zero padding) ->
min-max normalization (the GT logits) -> softmax. During training the GT
logits are area-downsampled to the response resolution before the softmax;
at inference the response map is bilinearly upsampled before the softmax.
"""

import itertools
from typing import Sequence, Tuple

import numpy as np
from scipy.ndimage import convolve1d, gaussian_filter

from core import (
    FixationSet,
    GridMap,
    PixelDistribution,
    area_resize,
    as_grid,
    bilinear_resize,
    min_max_normalize,
    softmax,
)
from errors import EmptyFixationsError, InvalidInputError
from metrics import auc_judd, nss
from models import CenterBiasParams, GtParams


def binary_fixation_map(fix: FixationSet) -> GridMap:
    b = np.zeros(fix.shape)
    rows, cols = fix.rows_cols()
    b[rows, cols] = 1.0
    return b


def gaussian_kernel_1d(width: int, sigma: float) -> np.ndarray:
    """Unit-sum Gaussian taps, truncated to width samples centered on zero"""
    x = np.arange(width) - width // 2
    kernel = np.exp(-(x**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def gaussian_smooth(b: GridMap, params: GtParams) -> GridMap:
    """Separable Gaussian convolution with zero padding at the borders"""
    grid = as_grid(b, "fixation map")
    kernel = gaussian_kernel_1d(params.kernel_width, params.sigma)
    y = convolve1d(grid, kernel, axis=0, mode="constant", cval=0.0)
    return convolve1d(y, kernel, axis=1, mode="constant", cval=0.0)


def gt_logits(fix: FixationSet, params: GtParams) -> GridMap:
    """Normalized smoothed map x_g that the GT softmax is applied to"""
    if len(fix) == 0:
        raise EmptyFixationsError("Cannot build ground truth from an empty fixation set")
    return min_max_normalize(gaussian_smooth(binary_fixation_map(fix), params))


def make_gt_distribution(fix: FixationSet, params: GtParams) -> PixelDistribution:
    return softmax(gt_logits(fix, params))


def gt_logits_from_distribution(g: PixelDistribution) -> GridMap:
    """
    Recover logits reproducing g under the softmax.

    log(g) is only defined up to a constant; the minimum is subtracted so
    the result matches gt_logits whenever g came from make_gt_distribution.
    """
    logits = np.log(np.maximum(g.values, np.finfo(np.float64).tiny))
    return logits - logits.min()


def _check_dims(shape: Tuple[int, int], out_h: int, out_w: int, shrink: bool) -> None:
    if out_h < 1 or out_w < 1:
        raise InvalidInputError(f"Output size {out_h}x{out_w} must be positive")
    in_h, in_w = shape
    if shrink and (out_h > in_h or out_w > in_w):
        raise InvalidInputError(f"Cannot downsample {in_h}x{in_w} to {out_h}x{out_w}")
    if not shrink and (out_h < in_h or out_w < in_w):
        raise InvalidInputError(f"Cannot upsample {in_h}x{in_w} to {out_h}x{out_w}")


def downsample_gt(x_g: GridMap, out_h: int, out_w: int) -> GridMap:
    """Area-average the normalized (pre-softmax) GT map"""
    grid = as_grid(x_g, "GT map")
    _check_dims(grid.shape, out_h, out_w, shrink=True)
    return area_resize(grid, out_h, out_w)


def upsample_bilinear(p_small: GridMap, out_h: int, out_w: int) -> GridMap:
    """Bilinear upsampling, pixel-center (align_corners=False) convention"""
    grid = as_grid(p_small, "response map")
    _check_dims(grid.shape, out_h, out_w, shrink=False)
    return bilinear_resize(grid, out_h, out_w)


def training_target(x_g: GridMap, out_h: int, out_w: int) -> PixelDistribution:
    """GT distribution at the network's response resolution"""
    return softmax(downsample_gt(x_g, out_h, out_w))


def center_gaussian(height: int, width: int, bias_sigma: float) -> np.ndarray:
    """Unit-sum Gaussian at the image center, sigma a fraction of the diagonal"""
    sigma = bias_sigma * np.hypot(height, width)
    rows = np.arange(height) - (height - 1) / 2.0
    cols = np.arange(width) - (width - 1) / 2.0
    g = np.exp(-(rows[:, None] ** 2 + cols[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def center_bias_postprocess(p: PixelDistribution, params: CenterBiasParams) -> PixelDistribution:
    values = p.values
    if params.blur_sigma > 0:
        values = gaussian_filter(values, sigma=params.blur_sigma, mode="constant", cval=0.0)
        total = values.sum()
        values = values / total if total > 0 else p.values
    if params.bias_weight > 0:
        center = center_gaussian(*p.shape, params.bias_sigma)
        values = (1.0 - params.bias_weight) * values + params.bias_weight * center
    return PixelDistribution(values=values / values.sum())


def optimize_postprocess(
    predictions: Sequence[PixelDistribution],
    fixations: Sequence[FixationSet],
    blur_grid: Sequence[float],
    weight_grid: Sequence[float],
    bias_sigma: float = 0.25,
    metric: str = "nss",
) -> Tuple[CenterBiasParams, float]:
    """
    Grid-search blur and center-bias weight on a validation set.

    Returns the parameters maximizing the mean metric and that mean; the
    first grid point wins ties.
    """
    scorers = {"nss": nss, "auc_judd": auc_judd}
    if metric not in scorers:
        raise InvalidInputError(
            f"Unknown optimization metric '{metric}'. Known: {', '.join(scorers)}"
        )
    if len(predictions) != len(fixations) or not predictions:
        raise InvalidInputError("Need equally many non-empty predictions and fixation sets")
    if not blur_grid or not weight_grid:
        raise InvalidInputError("Search grids must not be empty")

    scorer = scorers[metric]
    best_params, best_score = None, -np.inf
    for blur, weight in itertools.product(blur_grid, weight_grid):
        params = CenterBiasParams(blur_sigma=blur, bias_weight=weight, bias_sigma=bias_sigma)
        score = float(
            np.mean(
                [
                    scorer(center_bias_postprocess(p, params).values, fix)
                    for p, fix in zip(predictions, fixations)
                ]
            )
        )
        if score > best_score:
            best_params, best_score = params, score
    return best_params, best_score
