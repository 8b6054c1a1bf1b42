"""Instance mask refinement by rejecting depth outliers.

For every "thing" mask the depths under the mask are turned into a density
estimate. Walking out from the highest peak, the first grid point on each side
where the density drops below a threshold marks a cutoff; mask pixels whose
depth falls outside the two cutoffs (or is missing) are dropped.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import logging

import numpy as np

from . import kde

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 1e-6
MIN_SAMPLES = 32


@dataclass(frozen=True, order=True)
class PanopticLabel:
    """(class, instance) pair. instance_id 0 means a "stuff" segment."""

    class_id: int
    instance_id: int

    def __post_init__(self):
        if self.class_id < 0 or self.instance_id < 0:
            raise ValueError(f"label ids must be non-negative, got {self}")

    @property
    def is_thing(self) -> bool:
        return self.instance_id > 0


@dataclass
class InstanceMask:
    bitmap: np.ndarray
    label: PanopticLabel
    # id written to mask images; defaults to the instance id
    segment_id: int = None

    def __post_init__(self):
        self.bitmap = np.asarray(self.bitmap, dtype=bool)
        if self.bitmap.ndim != 2:
            raise ValueError(f"mask bitmap must be 2D, got shape {self.bitmap.shape}")
        if self.segment_id is None:
            self.segment_id = self.label.instance_id

    def with_bitmap(self, bitmap) -> "InstanceMask":
        return InstanceMask(bitmap, self.label, self.segment_id)


@dataclass(frozen=True)
class DepthCutoffs:
    low: float
    high: float


@dataclass(frozen=True)
class RefineConfig:
    grid_size: int = kde.DEFAULT_GRID_SIZE
    threshold: float = DEFAULT_THRESHOLD
    padding: float = kde.DEFAULT_PADDING
    min_samples: int = MIN_SAMPLES
    # smallest kernel width in meters; set to the depth quantum for sensor data
    min_bandwidth: float = 0.0

    def __post_init__(self):
        if self.grid_size < kde.MIN_GRID_SIZE:
            raise ValueError(f"grid_size must be >= {kde.MIN_GRID_SIZE}")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        if self.min_samples < 2:
            raise ValueError("min_samples must be at least 2")
        if not self.min_bandwidth >= 0:
            raise ValueError("min_bandwidth must be non-negative")

    def with_resolution(self, resolution: float) -> "RefineConfig":
        """Config whose bandwidth floor is at least the depth resolution."""
        return replace(self, min_bandwidth=max(self.min_bandwidth, float(resolution)))


@dataclass
class MaskRefinement:
    """Outcome for one mask. `skipped` holds the reason when no refinement ran."""

    mask: InstanceMask
    cutoffs: DepthCutoffs | None = None
    bandwidth: float | None = None
    bandwidth_fallback: bool = False
    skipped: str | None = None


@dataclass
class FrameRefinement:
    results: list = field(default_factory=list)

    @property
    def masks(self) -> list:
        return [r.mask for r in self.results]

    @property
    def skipped(self) -> dict:
        counts = {}
        for r in self.results:
            if r.skipped:
                counts[r.skipped] = counts.get(r.skipped, 0) + 1
        return counts

    @property
    def refined_count(self) -> int:
        return sum(1 for r in self.results if r.skipped is None)


class NoRefinementPossible(ValueError):
    pass


def _check_shapes(mask: InstanceMask, depth: np.ndarray):
    if mask.bitmap.shape != depth.shape:
        raise ValueError(f"mask shape {mask.bitmap.shape} does not match depth shape {depth.shape}")


def extract_instance_depths(mask: InstanceMask, depth) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    _check_shapes(mask, depth)
    values = depth[mask.bitmap]
    return values[values > 0]


def find_cutoffs(density: kde.DensityEstimate, threshold: float = DEFAULT_THRESHOLD) -> DepthCutoffs:
    """Nearest sub-threshold grid points on either side of the highest peak.

    A side without any sub-threshold point gets the grid end.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    y = np.asarray(density.density)
    x = np.asarray(density.points)
    if y.size < 2 or not np.all(np.isfinite(y)) or y.max() <= 0 or y.max() == y.min():
        raise NoRefinementPossible("density is flat or empty")
    peak = int(np.argmax(y))

    below_left = np.flatnonzero(y[:peak] < threshold)
    below_right = np.flatnonzero(y[peak:] < threshold)
    low = x[below_left[-1]] if below_left.size else x[0]
    high = x[peak + below_right[0]] if below_right.size else x[-1]
    return DepthCutoffs(float(low), float(high))


def refine_mask(mask: InstanceMask, depth, cfg: RefineConfig = RefineConfig()) -> MaskRefinement:
    depth = np.asarray(depth, dtype=np.float64)
    _check_shapes(mask, depth)
    if not mask.label.is_thing:
        return MaskRefinement(mask, skipped="stuff")

    samples = extract_instance_depths(mask, depth)
    if samples.size < cfg.min_samples:
        return MaskRefinement(mask, skipped="too_few_samples")
    try:
        estimate, fell_back = kde.estimate_density(samples, cfg.grid_size, cfg.padding, cfg.min_bandwidth)
        cutoffs = find_cutoffs(estimate, cfg.threshold)
    except (kde.DegenerateSampleError, NoRefinementPossible):
        return MaskRefinement(mask, skipped="degenerate")

    keep = mask.bitmap & (depth > 0) & (depth >= cutoffs.low) & (depth <= cutoffs.high)
    return MaskRefinement(mask.with_bitmap(keep), cutoffs, estimate.bandwidth, fell_back)


def refine_all(masks, depth, cfg: RefineConfig = RefineConfig(), workers: int = 1) -> FrameRefinement:
    """Refine each mask independently against the same depth map.

    Output order follows input order; results do not depend on `workers`.
    """
    depth = np.asarray(depth, dtype=np.float64).view()
    depth.flags.writeable = False
    masks = list(masks)
    for m in masks:
        _check_shapes(m, depth)
    if workers > 1 and len(masks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda m: refine_mask(m, depth, cfg), masks))
    else:
        results = [refine_mask(m, depth, cfg) for m in masks]
    frame = FrameRefinement(results)
    if frame.skipped:
        log.debug("refinement skipped: %s", frame.skipped)
    return frame
