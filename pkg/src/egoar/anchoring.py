"""3D anchoring and billboard compositing of AR overlays.

Cabin overlays are anchored by back-projecting the recommendation box
center at a fixed virtual depth and freezing the resulting point in the
cabin frame; road overlays anchor at the centroid of the map points
that project inside the box. Rendering draws a camera-facing billboard
whose on-screen size scales inversely with depth, alpha-composited so
the scene always stays partially visible (opacity is capped below 1 at
the type level).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AnchorNotFound
from .geometry import SE3, BoundingBox, CameraIntrinsics
from .recommend import EXTRA, INTRA, OverlayLabel


@dataclass(frozen=True)
class AnchorConfig:
    virtual_depth_m: float = 1.0     # cabin anchor depth
    default_alpha: float = 0.6
    billboard_size_px: int = 24      # nominal side at the reference depth
    reference_depth_m: float = 1.0

    def __post_init__(self):
        if self.virtual_depth_m <= 0.0 or self.reference_depth_m <= 0.0:
            raise ValueError("depths must be positive")


@dataclass(frozen=True)
class Overlay:
    """A placed overlay: label, static anchor in its branch frame, style."""

    label: OverlayLabel
    anchor: np.ndarray          # (3,) branch frame
    target: str                 # "intra" | "extra"
    size_px: int = 24
    alpha: float = 0.6
    color: tuple[int, int, int] | None = None  # None -> label glyph pattern

    def __post_init__(self):
        anchor = np.asarray(self.anchor, dtype=float).reshape(3)
        if not np.all(np.isfinite(anchor)):
            raise ValueError("anchor must be finite")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("overlay alpha must lie strictly in (0, 1)")
        if self.target not in (INTRA, EXTRA):
            raise ValueError(f"unknown target {self.target!r}")
        anchor.setflags(write=False)
        object.__setattr__(self, "anchor", anchor)


def anchor_intra(
    bbox: BoundingBox,
    k: CameraIntrinsics,
    cfg: AnchorConfig,
    pose_at_creation: SE3,
) -> np.ndarray:
    """Cabin-frame anchor for a box: back-project its center at the
    virtual depth, then lift into the cabin frame so it stays static."""
    center = np.array(bbox.center)
    p_cam = k.back_project(center, cfg.virtual_depth_m)
    return pose_at_creation.apply(p_cam)


def anchor_extra(
    bbox: BoundingBox,
    landmarks,
    pose: SE3,
    k: CameraIntrinsics,
) -> np.ndarray:
    """Road-frame anchor: mean position of map points projecting in the box.

    ``landmarks`` is an iterable of objects with a ``position`` attribute
    (or raw (3,) arrays). Points behind the camera never match.
    """
    positions = np.array([getattr(lm, "position", lm) for lm in landmarks],
                         dtype=float).reshape(-1, 3)
    if positions.size == 0:
        raise AnchorNotFound("empty map")
    cam = pose.inverse().apply(positions)
    in_front = cam[:, 2] > 0.0
    selected = np.zeros(len(positions), dtype=bool)
    if np.any(in_front):
        proj = k.project(cam[in_front])
        hit = bbox.contains(proj[:, 0], proj[:, 1])
        selected[np.nonzero(in_front)[0]] = hit
    if not np.any(selected):
        raise AnchorNotFound("no map point projects inside the box")
    return positions[selected].mean(axis=0)


def to_camera(anchor: np.ndarray, pose: SE3) -> np.ndarray:
    """Branch-frame anchor expressed in the current camera frame."""
    return pose.inverse().apply(np.asarray(anchor, dtype=float))


# 5x5 glyph bitmaps give each label a recognizable two-tone pattern
# without any font rendering
_GLYPHS = {
    OverlayLabel.DASHBOARD: [
        "#####",
        "#...#",
        "#.#.#",
        "#...#",
        "#####",
    ],
    OverlayLabel.LOW_FUEL_WARNING: [
        "..#..",
        "..#..",
        "..#..",
        ".....",
        "..#..",
    ],
    OverlayLabel.NAVIGATION_HINT: [
        "..#..",
        ".###.",
        "#.#.#",
        "..#..",
        "..#..",
    ],
    OverlayLabel.SERVICE_ADVERTISEMENT: [
        ".###.",
        "#....",
        ".###.",
        "....#",
        "###..",
    ],
    OverlayLabel.PARKING_INFORMATION: [
        "###..",
        "#..#.",
        "###..",
        "#....",
        "#....",
    ],
}

_LABEL_COLORS = {
    OverlayLabel.DASHBOARD: ((235, 235, 235), (40, 60, 90)),
    OverlayLabel.LOW_FUEL_WARNING: ((255, 220, 40), (120, 40, 20)),
    OverlayLabel.NAVIGATION_HINT: ((80, 220, 120), (20, 60, 40)),
    OverlayLabel.SERVICE_ADVERTISEMENT: ((240, 160, 60), (70, 40, 20)),
    OverlayLabel.PARKING_INFORMATION: ((90, 160, 250), (20, 30, 80)),
}


def _billboard_texture(overlay: Overlay, side: int) -> np.ndarray:
    if overlay.color is not None:
        return np.broadcast_to(
            np.array(overlay.color, dtype=float), (side, side, 3)).copy()
    glyph = np.array([[c == "#" for c in row] for row in _GLYPHS[overlay.label]])
    fg, bg = _LABEL_COLORS[overlay.label]
    idx = (np.arange(side) * glyph.shape[0]) // side
    scaled = glyph[np.ix_(idx, idx)]
    tex = np.where(scaled[..., None], np.array(fg, dtype=float),
                   np.array(bg, dtype=float))
    return tex


def render_overlay(
    frame: np.ndarray,
    overlay: Overlay,
    pose: SE3,
    k: CameraIntrinsics,
    cfg: AnchorConfig,
) -> np.ndarray:
    """Composite one overlay billboard into a copy of the frame.

    The anchor is transformed into the camera frame; overlays behind
    the camera or projecting outside the image are culled (the frame is
    returned unchanged). The billboard side is
    ``size_px * reference_depth / depth`` with symmetric rounding, and
    compositing is ``alpha * overlay + (1 - alpha) * background`` on
    covered pixels only; everything else is bit-identical to the input.
    """
    p_cam = to_camera(overlay.anchor, pose)
    if p_cam[2] <= 0.0:
        return frame
    center = k.project(p_cam)
    if not bool(k.contains(center)):
        return frame
    side = int(np.floor(overlay.size_px * cfg.reference_depth_m / p_cam[2] + 0.5))
    if side < 1:
        return frame

    cu, cv = int(round(center[0])), int(round(center[1]))
    r0 = cv - side // 2
    c0 = cu - side // 2
    r1, c1 = r0 + side, c0 + side

    rr0, cc0 = max(r0, 0), max(c0, 0)
    rr1, cc1 = min(r1, frame.shape[0]), min(c1, frame.shape[1])
    if rr0 >= rr1 or cc0 >= cc1:
        return frame

    tex = _billboard_texture(overlay, side)[rr0 - r0:rr1 - r0, cc0 - c0:cc1 - c0]
    out = frame.copy()
    patch = out[rr0:rr1, cc0:cc1].astype(float)
    blended = overlay.alpha * tex + (1.0 - overlay.alpha) * patch
    out[rr0:rr1, cc0:cc1] = np.rint(blended).astype(frame.dtype)
    return out


def render_overlays(frame, overlays, poses: dict, k, cfg) -> np.ndarray:
    """Composite overlays in order (later ones draw on top).

    ``poses`` maps branch tag -> current branch-from-camera pose; an
    overlay whose branch has no pose this frame is skipped.
    """
    out = frame
    for overlay in overlays:
        pose = poses.get(overlay.target)
        if pose is None:
            continue
        out = render_overlay(out, overlay, pose, k, cfg)
    return out
