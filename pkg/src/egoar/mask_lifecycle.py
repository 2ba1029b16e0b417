"""Dynamic-object mask lifecycle: detect, segment, track, re-detect.

Detection and segmentation run on a fixed K-frame cadence and whenever
tracking of any object was lost on the previous frame (an empty mask
set counts as lost, so the first frame always detects). Fresh masks
that overlap an existing object with IoU at or above the gate refresh
that object; below the gate they become new objects. Between detection
frames masks are propagated by the tracker alone.

The perception backends (detector, segmenter, tracker, depth estimator)
are pluggable adapters; two built-ins let the whole pipeline run with
no pretrained network: a ground-truth oracle with configurable dropout
and erosion noise, and an overlap-heuristic tracker driven by a
color-keyed proposal over the rendered frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import AdapterFailure, DimensionMismatch
from .geometry import BoundingBox

TRACKED = "tracked"
LOST = "lost"


@dataclass(frozen=True)
class TrackedObject:
    object_id: int
    mask: np.ndarray  # (H, W) bool
    status: str = TRACKED


@dataclass(frozen=True)
class SemanticMaskSet:
    """Per-frame dynamic-object masks with lifecycle state."""

    frame_index: int
    objects: tuple[TrackedObject, ...] = ()
    frame_shape: tuple[int, int] = (0, 0)

    def __post_init__(self):
        ids = [o.object_id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate object ids in mask set")

    @property
    def any_lost(self) -> bool:
        return any(o.status == LOST for o in self.objects)

    @classmethod
    def empty(cls, frame_shape: tuple[int, int]) -> "SemanticMaskSet":
        return cls(frame_index=-1, objects=(), frame_shape=tuple(frame_shape))


@dataclass(frozen=True)
class DetectionConfig:
    interval_k: int = 5
    iou_gate: float = 0.8
    box_threshold: float = 0.25
    text_threshold: float = 0.25
    prompt: str = "steering wheel, person, car, bicycle, motorbike"
    # extra prompt filters are carried as inert adapter data; the built-in
    # adapters never interpret them
    extra_prompt_filters: tuple = ()

    def __post_init__(self):
        if self.interval_k < 1:
            raise ValueError("interval_k must be >= 1")
        if not (0.0 < self.iou_gate <= 1.0):
            raise ValueError("iou_gate must lie in (0, 1]")


@dataclass
class PerceptionAdapters:
    """Pluggable perception backends.

    ``detector(frame) -> [BoundingBox]``;
    ``segmenter(frame, boxes) -> [mask]``;
    ``tracker(prev: SemanticMaskSet, frame) -> [mask | None]`` aligned with
    ``prev.objects`` (None = lost);
    ``depth_estimator(frame) -> DepthMap``.
    Adapters must be deterministic given their seed.
    """

    detector: object
    segmenter: object
    tracker: object
    depth_estimator: object


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection-over-union of two binary masks; 0 when both empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(a & b)) / union


def should_detect(frame_index: int, prev: SemanticMaskSet, cfg: DetectionConfig) -> bool:
    """True when this frame must run detection rather than tracking only."""
    if not prev.objects:
        return True
    if frame_index % cfg.interval_k == 0:
        return True
    return prev.any_lost


def dynamic_union(masks: SemanticMaskSet) -> np.ndarray:
    """Pixel-wise OR of all tracked-object masks."""
    out = np.zeros(masks.frame_shape, dtype=bool)
    for obj in masks.objects:
        if obj.status == TRACKED:
            out |= obj.mask
    return out


def step(
    frame,
    frame_index: int,
    prev: SemanticMaskSet,
    adapters: PerceptionAdapters,
    cfg: DetectionConfig,
) -> SemanticMaskSet:
    """Advance the mask lifecycle by one frame.

    Backend exceptions are wrapped in :class:`AdapterFailure`; sequence
    drivers catch it and carry the previous set forward with every
    object marked lost (see :func:`carry_forward_lost`).
    """
    try:
        if should_detect(frame_index, prev, cfg):
            return _detection_step(frame, frame_index, prev, adapters, cfg)
        return _tracking_step(frame, frame_index, prev, adapters)
    except AdapterFailure:
        raise
    except Exception as exc:  # backend error of any kind
        raise AdapterFailure(f"perception backend failed on frame {frame_index}: {exc!r}") from exc


def carry_forward_lost(prev: SemanticMaskSet, frame_index: int) -> SemanticMaskSet:
    """Degraded result for a skipped frame: prev masks, all marked lost."""
    objects = tuple(replace(o, status=LOST) for o in prev.objects)
    return SemanticMaskSet(frame_index=frame_index, objects=objects,
                           frame_shape=prev.frame_shape)


def _tracking_step(frame, frame_index, prev, adapters) -> SemanticMaskSet:
    propagated = adapters.tracker(prev, frame)
    objects = []
    for obj, mask in zip(prev.objects, propagated):
        if mask is None:
            objects.append(replace(obj, status=LOST))
        else:
            objects.append(TrackedObject(obj.object_id, np.asarray(mask, dtype=bool)))
    return SemanticMaskSet(frame_index=frame_index, objects=tuple(objects),
                           frame_shape=prev.frame_shape)


def _detection_step(frame, frame_index, prev, adapters, cfg) -> SemanticMaskSet:
    boxes = adapters.detector(frame)
    fresh = [np.asarray(m, dtype=bool) for m in adapters.segmenter(frame, boxes)]
    frame_shape = prev.frame_shape if prev.objects or prev.frame_shape != (0, 0) \
        else (fresh[0].shape if fresh else (0, 0))

    # greedy one-to-one matching of fresh masks against the previous
    # frame's masks, highest IoU first
    pairs = []
    for fi, fmask in enumerate(fresh):
        for oi, obj in enumerate(prev.objects):
            score = iou(fmask, obj.mask)
            if score >= cfg.iou_gate:
                pairs.append((score, fi, oi))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))

    matched_fresh: dict[int, int] = {}
    matched_obj: set[int] = set()
    for score, fi, oi in pairs:
        if fi in matched_fresh or oi in matched_obj:
            continue
        matched_fresh[fi] = oi
        matched_obj.add(oi)

    objects: list[TrackedObject] = []
    unmatched_prev = tuple(o for i, o in enumerate(prev.objects) if i not in matched_obj)
    if unmatched_prev:
        sub_prev = SemanticMaskSet(frame_index=prev.frame_index,
                                   objects=unmatched_prev,
                                   frame_shape=prev.frame_shape)
        propagated = adapters.tracker(sub_prev, frame)
        for obj, mask in zip(unmatched_prev, propagated):
            if mask is None:
                objects.append(replace(obj, status=LOST))
            else:
                objects.append(TrackedObject(obj.object_id, np.asarray(mask, dtype=bool)))

    next_id = max((o.object_id for o in prev.objects), default=-1) + 1
    for fi, fmask in enumerate(fresh):
        if fi in matched_fresh:
            obj = prev.objects[matched_fresh[fi]]
            objects.append(TrackedObject(obj.object_id, fmask))
        else:
            objects.append(TrackedObject(next_id, fmask))
            next_id += 1

    objects.sort(key=lambda o: o.object_id)
    return SemanticMaskSet(frame_index=frame_index, objects=tuple(objects),
                           frame_shape=frame_shape)


def run_sequence(frames, adapters, cfg, *, start_index: int = 1,
                 frame_shape=None) -> list[SemanticMaskSet]:
    """Run the lifecycle over a frame iterable, degrading on adapter failure."""
    first = None
    results: list[SemanticMaskSet] = []
    for offset, frame in enumerate(frames):
        index = start_index + offset
        if first is None:
            shape = frame_shape if frame_shape is not None else _frame_shape_of(frame)
            prev = SemanticMaskSet.empty(shape)
        else:
            prev = results[-1]
        try:
            results.append(step(frame, index, prev, adapters, cfg))
        except AdapterFailure:
            results.append(carry_forward_lost(prev, index))
        first = False
    return results


def _frame_shape_of(frame) -> tuple[int, int]:
    rgb = getattr(frame, "rgb", frame)
    return np.asarray(rgb).shape[:2]


# --- built-in adapters -------------------------------------------------

class OracleDetector:
    """Returns ground-truth dynamic-object boxes with optional dropout.

    Requires frames exposing ``dynamic_masks`` as a list of
    ``(object_id, mask)`` pairs. Dropout removes whole objects from a
    detection, exercising the loss / re-detection path.
    """

    shareable = True

    def __init__(self, dropout: float = 0.0, seed: int = 0):
        self.dropout = dropout
        self._rng = np.random.default_rng(seed)

    def __call__(self, frame):
        boxes = []
        for _, mask in frame.dynamic_masks:
            if not np.any(mask):
                continue
            if self.dropout > 0.0 and self._rng.random() < self.dropout:
                continue
            boxes.append(BoundingBox.from_mask(mask))
        return boxes


class OracleSegmenter:
    """Cuts ground-truth masks down to the detector's boxes."""

    shareable = True

    def __init__(self, erosion: int = 0):
        self.erosion = erosion

    def __call__(self, frame, boxes):
        masks = []
        for box in boxes:
            best, best_overlap = None, 0
            for _, gt in frame.dynamic_masks:
                inside = _mask_in_box(gt, box)
                overlap = int(np.count_nonzero(inside))
                if overlap > best_overlap:
                    best, best_overlap = inside, overlap
            if best is None:
                continue
            if self.erosion > 0:
                best = ndimage.binary_erosion(best, iterations=self.erosion)
            masks.append(best)
        return masks


class OracleTracker:
    """Propagates each object to its ground-truth mask in the next frame.

    ``loss_frames`` maps frame index -> set of object ids to report as
    lost on that frame (for deterministic schedule tests); objects whose
    ground-truth mask became empty (left the frame) are lost as well.
    """

    shareable = True

    def __init__(self, loss_frames: dict[int, set[int]] | None = None,
                 dropout: float = 0.0, seed: int = 1):
        self.loss_frames = loss_frames or {}
        self.dropout = dropout
        self._rng = np.random.default_rng(seed)

    def __call__(self, prev: SemanticMaskSet, frame):
        forced = self.loss_frames.get(getattr(frame, "index", None), set())
        gt = {oid: mask for oid, mask in frame.dynamic_masks}
        out = []
        for obj in prev.objects:
            if obj.object_id in forced:
                out.append(None)
                continue
            if self.dropout > 0.0 and self._rng.random() < self.dropout:
                out.append(None)
                continue
            # match by strongest overlap with the ground-truth masks
            best, best_overlap = None, 0
            for mask in gt.values():
                overlap = int(np.count_nonzero(mask & obj.mask))
                if overlap > best_overlap:
                    best, best_overlap = mask, overlap
            if best is None or not np.any(best):
                out.append(None)
            else:
                out.append(best)
        return out


class OverlapHeuristicTracker:
    """Ground-truth-free tracker over color-keyed connected components.

    Proposals are connected components of pixels matching the dynamic
    palette in the rendered frame; each previous mask moves to the
    component covering the largest fraction of it, and is lost below
    the overlap floor.
    """

    shareable = True

    def __init__(self, palette: tuple = ((200, 60, 50), (230, 150, 40)),
                 min_overlap: float = 0.3):
        self.palette = tuple(tuple(c) for c in palette)
        self.min_overlap = min_overlap

    def _proposal(self, rgb: np.ndarray) -> np.ndarray:
        match = np.zeros(rgb.shape[:2], dtype=bool)
        for color in self.palette:
            match |= np.all(rgb == np.array(color, dtype=rgb.dtype), axis=-1)
        return match

    def __call__(self, prev: SemanticMaskSet, frame):
        proposal = self._proposal(np.asarray(frame.rgb))
        labels, n = ndimage.label(proposal)
        out = []
        for obj in prev.objects:
            area = int(np.count_nonzero(obj.mask))
            if area == 0 or n == 0:
                out.append(None)
                continue
            overlaps = np.bincount(labels[obj.mask], minlength=n + 1)
            overlaps[0] = 0
            best = int(np.argmax(overlaps))
            if best == 0 or overlaps[best] / area < self.min_overlap:
                out.append(None)
            else:
                out.append(labels == best)
        return out


class DepthChannelOracle:
    """Depth estimator adapter that replays the frame's depth channel."""

    shareable = True

    def __call__(self, frame):
        return frame.depth


def _mask_in_box(mask: np.ndarray, box: BoundingBox) -> np.ndarray:
    out = np.zeros_like(mask, dtype=bool)
    r0, r1 = int(np.floor(box.v_min)), int(np.ceil(box.v_max)) + 1
    c0, c1 = int(np.floor(box.u_min)), int(np.ceil(box.u_max)) + 1
    out[r0:r1, c0:c1] = mask[r0:r1, c0:c1]
    return out
