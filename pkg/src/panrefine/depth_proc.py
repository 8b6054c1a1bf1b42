"""Depth map preprocessing: Gaussian hole interpolation.

Depth maps are plain 2D float arrays in meters, with 0.0 marking a missing
measurement.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class HoleFillConfig:
    kernel_size: int = 5
    sigma: float = 1.0

    def __post_init__(self):
        g = self.kernel_size
        if not isinstance(g, (int, np.integer)) or g < 3 or g % 2 == 0:
            raise ValueError(f"kernel_size must be an odd integer >= 3, got {g!r}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma!r}")


def validate_depth(depth) -> np.ndarray:
    """Return `depth` as a float64 2D array, raising if it is not a valid depth map."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2 or depth.shape[0] == 0 or depth.shape[1] == 0:
        raise ValueError(f"depth map must be a non-empty 2D array, got shape {depth.shape}")
    if not np.all(np.isfinite(depth)):
        raise ValueError("depth map contains non-finite values")
    if np.any(depth < 0):
        raise ValueError("depth map contains negative values")
    return depth


def gaussian_kernel_2d(g: int, sigma: float) -> np.ndarray:
    """Normalized g x g Gaussian kernel centered on the middle pixel.

    ``sigma=math.inf`` gives the flat box kernel.
    """
    if not isinstance(g, (int, np.integer)) or g < 1 or g % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {g!r}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    half = g // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    if math.isinf(sigma):
        row = np.ones_like(offsets)
    else:
        row = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel = np.outer(row, row)
    return kernel / kernel.sum()


def fill_holes(depth, cfg: HoleFillConfig = HoleFillConfig()) -> np.ndarray:
    """Fill zero pixels with the Gaussian-weighted mean of their nonzero neighbours.

    Weights are renormalized over the valid (nonzero) part of the g x g window,
    so a hole next to a constant surface takes exactly that surface's depth.
    Windows are clipped at the image border. Holes with no valid neighbour stay
    zero. Only input values are read, so the result does not depend on scan
    order. Nonzero pixels are returned unchanged.
    """
    depth = validate_depth(depth)
    kernel = gaussian_kernel_2d(cfg.kernel_size, cfg.sigma)
    valid = (depth > 0).astype(np.float64)

    weighted_sum = ndimage.correlate(depth, kernel, mode="constant", cval=0.0)
    weight_total = ndimage.correlate(valid, kernel, mode="constant", cval=0.0)

    out = depth.copy()
    holes = depth == 0
    has_support = ndimage.maximum_filter(valid, size=cfg.kernel_size, mode="constant", cval=0.0) > 0
    # weight_total can underflow for very small sigma relative to the window
    fillable = holes & has_support & (weight_total > 0)
    filled = weighted_sum[fillable] / weight_total[fillable]

    # clamp to the window's own range to remove float noise from the convex combination
    lo = ndimage.minimum_filter(np.where(depth > 0, depth, np.inf), size=cfg.kernel_size, mode="constant", cval=np.inf)
    hi = ndimage.maximum_filter(depth, size=cfg.kernel_size, mode="constant", cval=0.0)
    out[fillable] = np.clip(filled, lo[fillable], hi[fillable])
    return out
