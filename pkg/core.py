"""
Grid containers, pixel distributions and the softmax shared by every module.

All grids are 2-D float64 arrays, row-major, origin at the top-left pixel.
"""

from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import InvalidInputError, NotADistributionError, ShapeMismatchError

# A dense scalar field over image pixels.
GridMap = np.ndarray

DISTRIBUTION_TOL = 1e-9


def as_grid(values, name: str = "grid") -> GridMap:
    """
    Validate and convert values to a finite 2-D float64 grid.

    Raises:
        InvalidInputError: If the grid is not 2-D, is empty or holds NaN/Inf
    """
    grid = np.asarray(values, dtype=np.float64)
    if grid.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {grid.shape}")
    if grid.size == 0:
        raise InvalidInputError(f"{name} is empty")
    if not np.all(np.isfinite(grid)):
        raise InvalidInputError(f"{name} holds non-finite values")
    return grid


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "inputs") -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"Shape mismatch between {what}: {a.shape} vs {b.shape}")


class PixelDistribution(BaseModel):
    """A grid of non-negative values summing to one (generalized Bernoulli)"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def _check_distribution(cls, values) -> np.ndarray:
        grid = as_grid(values, "distribution")
        if np.any(grid < 0):
            raise NotADistributionError("distribution holds negative values")
        total = grid.sum()
        if abs(total - 1.0) > DISTRIBUTION_TOL:
            raise NotADistributionError(f"distribution sums to {total!r}, not 1")
        grid = grid.copy()
        grid.setflags(write=False)
        return grid

    @classmethod
    def from_map(cls, saliency: np.ndarray) -> "PixelDistribution":
        """
        Turn an arbitrary saliency map into a distribution.

        The map is shifted to be non-negative and divided by its sum;
        an all-equal map becomes uniform.
        """
        grid = as_grid(saliency, "saliency map")
        grid = grid - min(grid.min(), 0.0)
        total = grid.sum()
        if total <= 0:
            return cls(values=np.full(grid.shape, 1.0 / grid.size))
        return cls(values=grid / total)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


class FixationSet(BaseModel):
    """Discrete (row, col) fixations of one image; duplicates allowed"""

    model_config = ConfigDict(frozen=True)

    points: List[Tuple[int, int]] = Field(default_factory=list)
    image_height: int = Field(..., gt=0)
    image_width: int = Field(..., gt=0)

    @model_validator(mode="after")
    def _check_bounds(self) -> "FixationSet":
        for row, col in self.points:
            if not (0 <= row < self.image_height and 0 <= col < self.image_width):
                raise ValueError(
                    f"Fixation ({row}, {col}) outside "
                    f"{self.image_height}x{self.image_width} image"
                )
        return self

    def __len__(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.image_height, self.image_width)

    def rows_cols(self) -> Tuple[np.ndarray, np.ndarray]:
        if not self.points:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        coords = np.asarray(self.points, dtype=np.int64)
        return coords[:, 0], coords[:, 1]

    def unique_flat_indices(self) -> np.ndarray:
        """Sorted flat indices of fixated pixels (duplicates collapsed)"""
        rows, cols = self.rows_cols()
        return np.unique(rows * self.image_width + cols)


def softmax(logits: GridMap) -> PixelDistribution:
    """
    Normalize logits into a pixel distribution.

    The max is subtracted before exponentiation so logits of any finite
    magnitude are safe; the result is mathematically unchanged.
    """
    x = as_grid(logits, "logits")
    e = np.exp(x - x.max())
    return PixelDistribution(values=e / e.sum())


def softmax_jvp(p: PixelDistribution, upstream: GridMap) -> GridMap:
    """
    Chain an upstream gradient dL/dp through the softmax.

    Returns v with v_i = p_i * (u_i - sum_j u_j p_j), the product of the
    softmax Jacobian with u.
    """
    u = as_grid(upstream, "upstream gradient")
    check_same_shape(p.values, u, "distribution and upstream gradient")
    return p.values * (u - np.sum(u * p.values))


def min_max_normalize(y: GridMap) -> GridMap:
    """Rescale a map to [0, 1]; a constant map becomes all zeros"""
    grid = as_grid(y, "map")
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def area_weights(n_in: int, n_out: int) -> np.ndarray:
    """
    (n_out, n_in) matrix averaging input cells over each output cell.

    Output cell k covers [k * s, (k + 1) * s) with s = n_in / n_out; input
    cells partially inside it contribute by overlap, so fractional factors
    are exact area averages and integer factors are plain block means.
    """
    scale = n_in / n_out
    lo = np.arange(n_out)[:, None] * scale
    hi = lo + scale
    cells = np.arange(n_in)[None, :]
    overlap = np.minimum(hi, cells + 1) - np.maximum(lo, cells)
    return np.clip(overlap, 0.0, None) / scale


def bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """
    (n_out, n_in) linear interpolation matrix, pixel-center convention.

    Output pixel j samples input coordinate (j + 0.5) * n_in / n_out - 0.5,
    clamped to the first and last input pixel (align_corners=False).
    """
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    left = np.floor(src).astype(np.int64)
    right = np.minimum(left + 1, n_in - 1)
    frac = src - left

    weights = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(weights, (rows, left), 1.0 - frac)
    np.add.at(weights, (rows, right), frac)
    return weights


def area_resize(grid: GridMap, out_h: int, out_w: int) -> GridMap:
    grid = as_grid(grid)
    return area_weights(grid.shape[0], out_h) @ grid @ area_weights(grid.shape[1], out_w).T


def bilinear_resize(grid: GridMap, out_h: int, out_w: int) -> GridMap:
    grid = as_grid(grid)
    return (
        bilinear_weights(grid.shape[0], out_h)
        @ grid
        @ bilinear_weights(grid.shape[1], out_w).T
    )
