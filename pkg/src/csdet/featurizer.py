"""Hand-crafted region descriptors for linear detection heads.

For a box on an RGB raster the feature vector is, in order:

  * 3  mean channel intensities, rescaled to [-1, 1]
  * 3  channel standard deviations, rescaled
  * g*g mean-luminance spatial grid over the box (g = config.grid), rescaled
  * 1  log aspect ratio (height / width)
  * 1  normalized box area (sqrt of the raster-area fraction, rescaled)
  * 1  edge density (mean absolute finite difference of luminance)

All components are deterministic functions of (raster, box) and live in or
near [-1, 1].  The grid uses fractional pixel-overlap weights so that
horizontally flipping raster and box mirrors the grid columns exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)


class DegenerateBoxError(ValueError):
    """Box clips to less than one pixel of the raster."""


@dataclass(frozen=True)
class FeatureConfig:
    grid: int = 4

    def __post_init__(self) -> None:
        if self.grid < 1:
            raise ValueError(f"grid must be >= 1, got {self.grid}")


DEFAULT_FEATURES = FeatureConfig()


def feature_dim(config: FeatureConfig = DEFAULT_FEATURES) -> int:
    """Feature vector length for a config: 6 + grid^2 + 3."""
    return 6 + config.grid * config.grid + 3


def grid_for_dim(dim: int) -> int:
    """Invert feature_dim; used when only the dimension was persisted."""
    g = int(round(math.sqrt(dim - 9)))
    if g < 1 or feature_dim(FeatureConfig(grid=g)) != dim:
        raise ValueError(f"{dim} is not a valid feature dimension")
    return g


def _axis_weights(lo: float, hi: float, cells: int, first: int, count: int) -> np.ndarray:
    """Fractional overlap of each grid cell with each pixel along one axis.

    Returns (cells, count) weights where entry (k, i) is the overlap length
    of cell k of [lo, hi] with pixel interval [first + i, first + i + 1).
    """
    bounds = lo + (hi - lo) * np.arange(cells + 1) / cells
    px_lo = first + np.arange(count, dtype=np.float64)
    w = np.minimum(bounds[1:, None], px_lo[None, :] + 1.0) - np.maximum(
        bounds[:-1, None], px_lo[None, :]
    )
    return np.clip(w, 0.0, None)


def region_features(
    raster: np.ndarray, box: Box, config: FeatureConfig = DEFAULT_FEATURES
) -> np.ndarray:
    """Feature vector for one box; see module docstring for the layout."""
    if raster.ndim != 3 or raster.shape[2] != 3:
        raise ValueError(f"raster must be HxWx3, got shape {raster.shape}")
    h, w = raster.shape[:2]
    x1 = max(box.x1, 0.0)
    y1 = max(box.y1, 0.0)
    x2 = min(box.x2, float(w))
    y2 = min(box.y2, float(h))
    if x2 <= x1 or y2 <= y1:
        raise DegenerateBoxError(f"{box} lies outside the {w}x{h} raster")
    c0, c1 = int(math.floor(x1)), int(math.ceil(x2))
    r0, r1 = int(math.floor(y1)), int(math.ceil(y2))
    if c1 - c0 < 1 or r1 - r0 < 1:
        raise DegenerateBoxError(f"{box} covers less than one pixel")

    patch = np.asarray(raster[r0:r1, c0:c1, :], dtype=np.float64)
    means = patch.mean(axis=(0, 1))
    stds = patch.std(axis=(0, 1))
    luma = patch @ LUMA_WEIGHTS

    wx = _axis_weights(x1, x2, config.grid, c0, c1 - c0)
    wy = _axis_weights(y1, y2, config.grid, r0, r1 - r0)
    cell_sums = wy @ luma @ wx.T
    cell_mass = np.outer(wy.sum(axis=1), wx.sum(axis=1))
    grid = cell_sums / cell_mass

    if luma.shape[1] >= 2:
        dx = np.abs(np.diff(luma, axis=1)).mean()
    else:
        dx = 0.0
    if luma.shape[0] >= 2:
        dy = np.abs(np.diff(luma, axis=0)).mean()
    else:
        dy = 0.0

    log_aspect = math.log((y2 - y1) / (x2 - x1))
    norm_area = 2.0 * math.sqrt((x2 - x1) * (y2 - y1) / (w * h)) - 1.0

    out = np.empty(feature_dim(config), dtype=np.float64)
    out[0:3] = 2.0 * means - 1.0
    out[3:6] = 2.0 * stds
    out[6 : 6 + config.grid * config.grid] = 2.0 * grid.ravel() - 1.0
    out[-3] = log_aspect
    out[-2] = norm_area
    out[-1] = dx + dy
    return out
