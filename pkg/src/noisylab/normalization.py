"""Dynamic intensity windowing for grayscale images.

Pipeline: 256-bin histogram over the observed range, median + Gaussian
denoising of the histogram, inward threshold scan for a tight window
[b_low, b_high], then a linear rescale of the image into [0, 1] with
clamping of out-of-window pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateHistogram

N_BINS = 256


@dataclass(frozen=True)
class GrayImage:
    """A single-channel image of finite, nonnegative intensities."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise DataError("image must be a nonempty 2-d array")
        if not np.isfinite(arr).all():
            raise DataError("image intensities must be finite")
        if arr.min() < 0:
            raise DataError("image intensities must be nonnegative")
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class IntensityHistogram:
    """256 uniform bins spanning the observed [lo, hi] intensity range.

    Bins are left-closed right-open except the last, which is closed, so
    counts always sum to the pixel count. A constant image collapses to a
    single occupied bin and is flagged degenerate.
    """

    counts: np.ndarray
    lo: float
    hi: float

    @property
    def degenerate(self) -> bool:
        return self.hi <= self.lo

    @property
    def bin_width(self) -> float:
        return (self.hi - self.lo) / N_BINS

    def bin_lower_edge(self, index: int) -> float:
        return self.lo + index * self.bin_width

    def bin_upper_edge(self, index: int) -> float:
        return self.lo + (index + 1) * self.bin_width


@dataclass(frozen=True)
class SmoothingConfig:
    """Histogram denoising and bound-scan parameters.

    The filters suppress single-bin spikes (anonymization boxes, text
    overlays) while keeping broad mass; tau scales the scan threshold
    relative to the smoothed maximum. median_width=1 and gauss_sigma=0
    disable the respective filter.
    """

    median_width: int = 5
    gauss_sigma: float = 2.0
    tau: float = 0.001

    def __post_init__(self):
        if self.median_width < 1 or self.median_width % 2 == 0:
            raise DataError("median_width must be a positive odd integer")
        if self.gauss_sigma < 0:
            raise DataError("gauss_sigma must be >= 0")
        if self.tau < 0:
            raise DataError("tau must be >= 0")


@dataclass(frozen=True)
class WindowBounds:
    """Detected intensity window plus the histograms that produced it."""

    b_low: float
    b_high: float
    histogram_raw: np.ndarray
    histogram_smoothed: np.ndarray

    def __post_init__(self):
        if not self.b_low < self.b_high:
            raise DataError("window requires b_low < b_high")


def build_histogram(image: GrayImage) -> IntensityHistogram:
    """Bin pixel intensities into 256 uniform bins over [min, max]."""
    pixels = image.pixels
    lo = float(pixels.min())
    hi = float(pixels.max())
    if hi <= lo:
        counts = np.zeros(N_BINS, dtype=np.int64)
        counts[0] = pixels.size
        return IntensityHistogram(counts, lo, hi)
    scaled = (pixels.ravel() - lo) * (N_BINS / (hi - lo))
    idx = np.minimum(scaled.astype(np.int64), N_BINS - 1)
    counts = np.bincount(idx, minlength=N_BINS).astype(np.int64)
    return IntensityHistogram(counts, lo, hi)


def _median_filter(values: np.ndarray, width: int) -> np.ndarray:
    if width == 1:
        return values.astype(np.float64)
    half = width // 2
    padded = np.pad(values.astype(np.float64), half, mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, width)
    return np.median(windows, axis=1)


def _gaussian_filter(values: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return values.astype(np.float64)
    radius = int(np.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(values.astype(np.float64), radius, mode="reflect")
    return np.convolve(padded, kernel, mode="valid")


def detect_bounds(histogram: IntensityHistogram,
                  config: SmoothingConfig = SmoothingConfig()) -> WindowBounds:
    """Denoise the histogram and scan inward for the intensity window.

    After median filtering and Gaussian smoothing, walks in from both ends
    to the first bin whose smoothed mass exceeds tau * max(smoothed); the
    window is [lower edge of the low bin, upper edge of the high bin].
    """
    if histogram.degenerate or np.count_nonzero(histogram.counts) < 2:
        raise DegenerateHistogram("histogram has fewer than two occupied bins")
    smoothed = _gaussian_filter(
        _median_filter(histogram.counts, config.median_width), config.gauss_sigma
    )
    threshold = config.tau * smoothed.max()
    above = np.flatnonzero(smoothed > threshold)
    if above.size == 0:
        raise DegenerateHistogram("no histogram bin exceeds the scan threshold")
    low_bin = int(above[0])
    high_bin = int(above[-1])
    return WindowBounds(
        histogram.bin_lower_edge(low_bin),
        histogram.bin_upper_edge(high_bin),
        histogram.counts.copy(),
        smoothed,
    )


def apply_window(image: GrayImage, bounds: WindowBounds) -> GrayImage:
    """Linearly map [b_low, b_high] to [0, 1], clamping outside pixels."""
    scaled = (image.pixels - bounds.b_low) / (bounds.b_high - bounds.b_low)
    return GrayImage(np.clip(scaled, 0.0, 1.0))


def normalize(image: GrayImage, config: SmoothingConfig = SmoothingConfig()) -> GrayImage:
    """Full dynamic windowing: histogram, bound detection, linear rescale."""
    return apply_window(image, detect_bounds(build_histogram(image), config))
