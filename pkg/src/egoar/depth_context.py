"""Depth-guided cabin/road context separation.

Each frame's depth map is quantized to 256 bins; the two dominant
histogram peaks locate the near (cabin) and far (road) depth modes and
the valley between them is the separation threshold. Pixels under the
dynamic-object mask are excluded from the histogram and from both
output layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSeparation, DimensionMismatch, EmptyHistogram

N_BINS = 256


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth quantized to integer bins 0..255 (0 = nearest)."""

    bins: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        b = np.asarray(self.bins)
        if b.ndim != 2 or b.dtype != np.uint8:
            raise ValueError("depth bins must be a 2-D uint8 array")
        object.__setattr__(self, "bins", b)

    @property
    def height(self) -> int:
        return self.bins.shape[0]

    @property
    def width(self) -> int:
        return self.bins.shape[1]

    @classmethod
    def from_normalized(cls, values: np.ndarray) -> "DepthMap":
        """Quantize depth in [0, 1]: bin = floor(clamp(d) * 255)."""
        v = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
        return cls(np.floor(v * (N_BINS - 1)).astype(np.uint8))

    @classmethod
    def from_meters(cls, depth_m: np.ndarray, max_depth_m: float) -> "DepthMap":
        return cls.from_normalized(np.asarray(depth_m, dtype=float) / max_depth_m)


@dataclass(frozen=True)
class DepthHistogram:
    """256-bin histogram with its peak pair and valley threshold."""

    counts: np.ndarray
    k1: int | None
    k2: int | None
    k_min: int | None


@dataclass(frozen=True)
class ContextLayers:
    """Binary cabin/road masks and the matching RGBA layers for one frame."""

    intra_alpha: np.ndarray  # (H, W) bool
    extra_alpha: np.ndarray  # (H, W) bool
    intra_rgba: np.ndarray   # (H, W, 4) uint8
    extra_rgba: np.ndarray   # (H, W, 4) uint8
    histogram: DepthHistogram


def build_histogram(depth: DepthMap, excluded: np.ndarray) -> np.ndarray:
    """Count depth bins over pixels where ``excluded`` is False.

    Returns the (256,) count vector; the sum equals the number of
    unexcluded pixels.
    """
    excluded = np.asarray(excluded, dtype=bool)
    if excluded.shape != depth.bins.shape:
        raise DimensionMismatch(
            f"mask {excluded.shape} vs depth {depth.bins.shape}")
    values = depth.bins[~excluded]
    return np.bincount(values.ravel(), minlength=N_BINS).astype(np.int64)


def find_peaks(counts: np.ndarray) -> tuple[int, int]:
    """Dominant peak and distance-weighted second peak of a histogram.

    ``k1`` maximizes the count; ``k2`` maximizes ``(k - k1)^2 * count``.
    Ties resolve to the smallest bin index. When all mass sits in a
    single bin every weighted score is zero and the tie-break yields
    ``k2 = 0``; callers detect that degenerate case via
    :func:`is_unimodal`.
    """
    counts = np.asarray(counts)
    if counts.sum() == 0:
        raise EmptyHistogram("all histogram counts are zero")
    k1 = int(np.argmax(counts))
    weights = (np.arange(N_BINS) - k1) ** 2 * counts
    k2 = int(np.argmax(weights))
    return k1, k2


def is_unimodal(counts: np.ndarray, k1: int) -> bool:
    """True when no histogram mass lies away from the dominant peak."""
    weights = (np.arange(N_BINS) - k1) ** 2 * np.asarray(counts)
    return int(weights.max()) == 0


def find_valley(counts: np.ndarray, k1: int, k2: int) -> int:
    """Smallest-index minimizer of the histogram on [min(k1,k2), max(k1,k2)]."""
    if k1 == k2:
        raise DegenerateSeparation("peaks coincide; no valley interval")
    lo, hi = min(k1, k2), max(k1, k2)
    counts = np.asarray(counts)
    return lo + int(np.argmin(counts[lo:hi + 1]))


def separate_contexts(
    rgb: np.ndarray,
    depth: DepthMap,
    dynamic_mask: np.ndarray,
    *,
    fallback_k_min: int | None = None,
    invert_depth: bool = False,
) -> ContextLayers:
    """Split a frame into cabin (near) and road (far) RGBA layers.

    Dynamic pixels contribute neither to the histogram nor to either
    layer. Pixels exactly at the valley bin belong to neither layer.
    On a degenerate (unimodal or fully dynamic) frame the previous
    frame's threshold ``fallback_k_min`` is reused; without one the
    degenerate condition is raised.

    ``invert_depth`` flips the near/far convention for disparity-style
    estimators where larger values are nearer.
    """
    rgb = np.asarray(rgb)
    dynamic_mask = np.asarray(dynamic_mask, dtype=bool)
    if rgb.shape[:2] != depth.bins.shape or dynamic_mask.shape != depth.bins.shape:
        raise DimensionMismatch("rgb, depth and dynamic mask shapes disagree")

    counts = build_histogram(depth, dynamic_mask)
    k1 = k2 = None
    if counts.sum() == 0:
        if fallback_k_min is None:
            raise EmptyHistogram("every pixel is dynamic and no fallback threshold")
        k_min = int(fallback_k_min)
    else:
        k1, k2 = find_peaks(counts)
        if is_unimodal(counts, k1):
            if fallback_k_min is None:
                raise DegenerateSeparation(
                    "unimodal depth histogram and no fallback threshold")
            k_min = int(fallback_k_min)
        else:
            k_min = find_valley(counts, k1, k2)

    keep = ~dynamic_mask
    if invert_depth:
        intra_alpha = keep & (depth.bins > k_min)
        extra_alpha = keep & (depth.bins < k_min)
    else:
        intra_alpha = keep & (depth.bins < k_min)
        extra_alpha = keep & (depth.bins > k_min)

    hist = DepthHistogram(counts=counts, k1=k1, k2=k2, k_min=k_min)
    return ContextLayers(
        intra_alpha=intra_alpha,
        extra_alpha=extra_alpha,
        intra_rgba=concat_rgba(rgb, intra_alpha),
        extra_rgba=concat_rgba(rgb, extra_alpha),
        histogram=hist,
    )


def concat_rgba(rgb: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Append a binary mask to an RGB image as a 0/255 alpha channel."""
    a = (np.asarray(alpha, dtype=bool) * np.uint8(255))
    return np.dstack([np.asarray(rgb, dtype=np.uint8), a])


class ContextSeparator:
    """Stateful per-sequence wrapper carrying the previous-frame threshold.

    Frames within one sequence must be fed in order; the first frame of
    a sequence with no valid threshold raises.
    """

    def __init__(self, *, invert_depth: bool = False):
        self.invert_depth = invert_depth
        self.last_k_min: int | None = None

    def separate(self, rgb, depth, dynamic_mask) -> ContextLayers:
        layers = separate_contexts(
            rgb, depth, dynamic_mask,
            fallback_k_min=self.last_k_min,
            invert_depth=self.invert_depth,
        )
        self.last_k_min = layers.histogram.k_min
        return layers
