"""One-dimensional Gaussian kernel density estimation on an equidistant grid.

The fast path is: :func:`make_grid` -> :func:`linear_binning` ->
:func:`isj_bandwidth` -> :func:`fft_kde`. :func:`direct_kde` evaluates the
plain sum over samples and is kept as a reference.
"""

from dataclasses import dataclass
import logging
import math
import warnings

import numpy as np
from scipy import fft as sp_fft
from scipy.optimize import brentq

log = logging.getLogger(__name__)

DEFAULT_GRID_SIZE = 1024
DEFAULT_PADDING = 3.0
MIN_GRID_SIZE = 16
# below this variance (m^2) there is no density to estimate
DEGENERATE_VARIANCE = 1e-12

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class DegenerateSampleError(ValueError):
    """Samples have (numerically) zero spread, so no bandwidth exists."""


class BandwidthFallbackWarning(RuntimeWarning):
    """ISJ found no fixed point; Silverman's rule was used instead."""


@dataclass(frozen=True)
class GridSpec:
    start: float
    stop: float
    size: int

    def __post_init__(self):
        if not self.start < self.stop:
            raise ValueError(f"grid start {self.start} must be below stop {self.stop}")
        if self.size < MIN_GRID_SIZE:
            raise ValueError(f"grid needs at least {MIN_GRID_SIZE} points, got {self.size}")

    @property
    def step(self) -> float:
        return (self.stop - self.start) / (self.size - 1)

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.start, self.stop, self.size)


@dataclass(frozen=True)
class BinnedSample:
    grid: GridSpec
    counts: np.ndarray
    n: int


@dataclass(frozen=True)
class DensityEstimate:
    """Density values at `points` for a Gaussian kernel of width `bandwidth`."""

    points: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.points))


def _as_samples(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    return x


def check_spread(samples) -> np.ndarray:
    x = _as_samples(samples)
    if x.size < 2 or np.var(x) < DEGENERATE_VARIANCE:
        raise DegenerateSampleError(f"{x.size} samples with no usable spread")
    return x


def silverman_bandwidth(samples) -> float:
    x = check_spread(samples)
    std = np.std(x, ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(std, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = std
    return float(0.9 * spread * x.size ** -0.2)


def make_grid(samples, size: int = DEFAULT_GRID_SIZE, padding: float = DEFAULT_PADDING) -> GridSpec:
    """Equidistant grid spanning the samples plus `padding` Silverman bandwidths per side."""
    x = check_spread(samples)
    pad = padding * silverman_bandwidth(x) if padding > 0 else 0.0
    return GridSpec(float(x.min() - pad), float(x.max() + pad), int(size))


def linear_binning(samples, grid: GridSpec) -> BinnedSample:
    """Split each sample's unit mass between its two neighbouring grid points.

    A sample at fractional grid position ``j + r`` gives ``1 - r`` to point j
    and ``r`` to point j + 1.
    """
    x = _as_samples(samples)
    # tolerate float round-off at the boundaries
    slack = 1e-9 * grid.step
    if x.size and (x.min() < grid.start - slack or x.max() > grid.stop + slack):
        raise ValueError(
            f"samples span [{x.min()}, {x.max()}] outside grid [{grid.start}, {grid.stop}]"
        )
    pos = np.clip((x - grid.start) / grid.step, 0.0, grid.size - 1)
    left = np.minimum(np.floor(pos).astype(np.intp), grid.size - 2)
    frac = pos - left
    counts = np.bincount(left, weights=1.0 - frac, minlength=grid.size)
    counts += np.bincount(left + 1, weights=frac, minlength=grid.size)
    return BinnedSample(grid, counts, int(x.size))


def _binned_silverman(binned: BinnedSample) -> float:
    pts = binned.grid.points
    w = binned.counts / binned.counts.sum()
    mean = np.dot(w, pts)
    std = math.sqrt(max(np.dot(w, (pts - mean) ** 2), 0.0))
    cdf = np.cumsum(w)
    q25, q75 = np.interp([0.25, 0.75], cdf, pts)
    spread = min(std, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = std
    return 0.9 * spread * binned.n ** -0.2


def _isj_functional(t, n: int, k_sq: np.ndarray, a_sq: np.ndarray, stages: int = 7):
    """t minus the plug-in estimate of the optimal squared bandwidth at t.

    Works on the unit interval; roots of this function are ISJ solutions.
    Accepts a scalar or a 1D array of t values; invalid entries come back NaN.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    decay = -(math.pi**2) * k_sq

    def functional(s, times):
        return 2.0 * math.pi ** (2 * s) * (np.exp(np.outer(times, decay)) @ (k_sq**s * a_sq))

    f = functional(stages, t)
    for s in range(stages - 1, 1, -1):
        odd_factorial = np.prod(np.arange(1, 2 * s, 2, dtype=np.float64))
        const = (1 + 0.5 ** (s + 0.5)) / 3 * odd_factorial / (n * math.sqrt(math.pi / 2) * f)
        t_s = const ** (2.0 / (3 + 2 * s))
        t_s = np.where(np.isfinite(t_s) & (f > 0), t_s, np.nan)
        f = functional(s, np.nan_to_num(t_s, nan=0.0))
        f = np.where(np.isnan(t_s), np.nan, f)
    out = t - (2 * n * math.sqrt(math.pi) * f) ** -0.4
    return np.where((f > 0) & np.isfinite(f), out, np.nan)


def isj_root(binned: BinnedSample, t_max: float = 0.1) -> float | None:
    """Smallest ISJ fixed point on the grid's unit scale, or None if there is none.

    The grid is mapped onto the unit interval with each count sitting at a
    cell centre, which is the sampling the type-II DCT assumes. Roots are
    bracketed on a log-spaced scan of (0, t_max] and refined with Brent's method.
    """
    counts = np.asarray(binned.counts, dtype=np.float64)
    size = counts.size
    coeffs = sp_fft.dct(counts / counts.sum(), type=2)
    k = np.arange(1, size, dtype=np.float64)
    k_sq = k * k
    a_sq = (coeffs[1:] / 2.0) ** 2

    def func(t):
        with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
            return _isj_functional(t, binned.n, k_sq, a_sq)

    ts = np.geomspace(1e-12, t_max, 45)
    values = func(ts)
    for i in range(ts.size):
        v = values[i]
        if v == 0.0:
            return float(ts[i])
        if i and values[i - 1] < 0 < v:
            return float(brentq(lambda t: func(t)[0], ts[i - 1], ts[i], xtol=1e-15, rtol=1e-12))
    return None


def isj_bandwidth_info(binned: BinnedSample) -> tuple[float, bool]:
    """Improved Sheather-Jones bandwidth and whether the Silverman fallback was used."""
    if binned.n < 2:
        raise DegenerateSampleError("need at least two samples for a bandwidth")
    span = binned.grid.size * binned.grid.step
    t = isj_root(binned)
    if t is not None:
        h = math.sqrt(t) * span
        if h > 0 and math.isfinite(h):
            return h, False
    h = _binned_silverman(binned)
    if not h > 0:
        raise DegenerateSampleError("binned samples have zero spread")
    return h, True


def isj_bandwidth(binned: BinnedSample) -> float:
    h, fell_back = isj_bandwidth_info(binned)
    if fell_back:
        warnings.warn("ISJ fixed point not found, using Silverman bandwidth", BandwidthFallbackWarning, stacklevel=2)
    return h


def kernel_weights(grid: GridSpec, n: int, bandwidth: float) -> np.ndarray:
    """Gaussian weights at lags -(M-1)..(M-1) grid steps, scaled by 1/(nH)."""
    lags = np.arange(-(grid.size - 1), grid.size, dtype=np.float64)
    return np.exp(-0.5 * (lags * grid.step / bandwidth) ** 2) / (n * bandwidth * _SQRT_2PI)


def fft_kde(binned: BinnedSample, bandwidth: float, normalize: bool = True) -> DensityEstimate:
    """Density on the grid as a linear convolution of bin counts with the kernel.

    The convolution is done with a zero-padded real FFT (length >= 3M - 2), so
    there is no circular wrap-around. With ``normalize`` the result is scaled to
    integrate to one under the trapezoid rule.
    """
    if not bandwidth > 0 or not math.isfinite(bandwidth):
        raise ValueError(f"bandwidth must be positive and finite, got {bandwidth!r}")
    grid = binned.grid
    size = grid.size
    n = binned.n if binned.n > 0 else 1
    kern = kernel_weights(grid, n, bandwidth)

    full = size + kern.size - 1
    nfft = sp_fft.next_fast_len(full, real=True)
    conv = sp_fft.irfft(sp_fft.rfft(binned.counts, nfft) * sp_fft.rfft(kern, nfft), nfft)
    # lag -(M-1) sits at kernel index 0, so output j lives at j + M - 1
    density = conv[size - 1 : 2 * size - 1]
    density = np.maximum(density, 0.0)

    points = grid.points
    if normalize:
        area = np.trapezoid(density, points)
        if area > 0:
            density = density / area
    return DensityEstimate(points, density, float(bandwidth))


def binned_direct_sum(binned: BinnedSample, bandwidth: float) -> np.ndarray:
    """O(M^2) evaluation of the binned estimator; reference for :func:`fft_kde`."""
    pts = binned.grid.points
    n = binned.n if binned.n > 0 else 1
    z = (pts[:, None] - pts[None, :]) / bandwidth
    return (np.exp(-0.5 * z * z) @ binned.counts) / (n * bandwidth * _SQRT_2PI)


def direct_kde(samples, bandwidth: float, eval_points) -> DensityEstimate:
    """Average of Gaussians of width `bandwidth` centred on the samples."""
    x = _as_samples(samples)
    if x.size == 0:
        raise ValueError("direct_kde needs at least one sample")
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth!r}")
    pts = np.asarray(eval_points, dtype=np.float64).ravel()
    density = np.zeros_like(pts)
    # chunk over samples to bound memory
    for chunk in np.array_split(x, max(1, x.size // 4096 + 1)):
        z = (pts[:, None] - chunk[None, :]) / bandwidth
        density += np.exp(-0.5 * z * z).sum(axis=1)
    density /= x.size * bandwidth * _SQRT_2PI
    return DensityEstimate(pts, density, float(bandwidth))


def estimate_density(samples, size: int = DEFAULT_GRID_SIZE, padding: float = DEFAULT_PADDING, min_bandwidth: float = 0.0):
    """Grid, bin, pick the ISJ bandwidth and evaluate by FFT.

    The bandwidth is never smaller than the grid step or `min_bandwidth`.
    Narrower kernels cannot be represented on the grid, and on quantized
    data (depth in whole millimetres) ISJ happily resolves the quantization
    comb, which splits one surface into many spikes.

    Returns ``(estimate, fell_back)``. Raises DegenerateSampleError for
    samples without spread.
    """
    x = check_spread(samples)
    grid = make_grid(x, size, padding)
    binned = linear_binning(x, grid)
    h, fell_back = isj_bandwidth_info(binned)
    if fell_back:
        log.debug("ISJ fallback to Silverman for %d samples", x.size)
    return fft_kde(binned, max(h, grid.step, min_bandwidth)), fell_back
