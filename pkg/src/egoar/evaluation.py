"""Spatial-consistency evaluation via fiducial-marker reprojection.

A square marker of known geometry is detected at a reference frame t0
and again at later frames. Chaining the estimated camera motion between
t0 and t_i with the detection at t_i predicts where the marker corners
should appear at t0; the pixel distance to the corners actually
detected at t0 measures accumulated tracking error. Trajectory-level
error metrics against ground truth round out the synthetic test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyReport, IndexMismatch, NonPositiveDepth
from .geometry import SE3, CameraIntrinsics


@dataclass(frozen=True)
class FiducialMarker:
    """Square planar marker; corners live in its own frame (z = 0 plane)."""

    id: int
    side_length: float
    placement: SE3  # branch-from-marker
    target: str     # "intra" | "extra"

    def corners(self) -> np.ndarray:
        h = 0.5 * self.side_length
        return np.array([
            [-h, -h, 0.0],
            [h, -h, 0.0],
            [h, h, 0.0],
            [-h, h, 0.0],
        ])


@dataclass(frozen=True)
class MarkerDetection:
    frame_index: int
    pose: SE3                 # camera-from-marker
    corner_pixels: np.ndarray  # (4, 2)

    def __post_init__(self):
        px = np.asarray(self.corner_pixels, dtype=float).reshape(4, 2)
        px.setflags(write=False)
        object.__setattr__(self, "corner_pixels", px)


@dataclass(frozen=True)
class ReprojectionReport:
    branch: str
    lcd_enabled: bool
    errors_px: np.ndarray          # flat array over frames x corners
    per_frame: dict[int, list[float]] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.errors_px.size)

    @property
    def mean_px(self) -> float:
        return float(self.errors_px.mean())

    @property
    def std_px(self) -> float:
        # population standard deviation
        return float(self.errors_px.std())

    def as_dict(self) -> dict:
        return {
            "branch": self.branch,
            "lcd": self.lcd_enabled,
            "n": self.n,
            "mean_px": self.mean_px,
            "std_px": self.std_px,
            "std_kind": "population",
            "per_frame": {str(k): v for k, v in sorted(self.per_frame.items())},
        }


def chain_relative(pose_t0: SE3, pose_ti: SE3) -> SE3:
    """Camera motion from frame t_i to frame t0, both poses in one branch."""
    return pose_t0.inverse() @ pose_ti


def estimate_marker_at_t0(relative: SE3, detection_ti: MarkerDetection) -> SE3:
    """Predicted camera-from-marker pose at t0 via the chained motion."""
    return relative @ detection_ti.pose


def reprojection_error(
    estimated_marker: SE3,
    marker: FiducialMarker,
    gt_detection_t0: MarkerDetection,
    k: CameraIntrinsics,
) -> np.ndarray:
    """Per-corner pixel distance between predicted and detected corners."""
    corners_cam = estimated_marker.apply(marker.corners())
    if np.any(corners_cam[:, 2] <= 0.0):
        raise NonPositiveDepth("marker corner behind camera")
    predicted = k.project(corners_cam)
    return np.linalg.norm(predicted - gt_detection_t0.corner_pixels, axis=1)


def marker_reprojection_series(
    trajectory: dict[int, SE3],
    detections: list[MarkerDetection],
    marker: FiducialMarker,
    k: CameraIntrinsics,
    *,
    lcd_enabled: bool = False,
) -> ReprojectionReport:
    """Reprojection errors across a sequence for one marker and branch.

    The reference frame t0 is the first frame where the marker was
    detected and the branch holds a pose. Frames whose chained marker
    pose lands behind the camera are skipped.
    """
    usable = [d for d in detections if d.frame_index in trajectory]
    if not usable:
        raise EmptyReport("no detection coincides with a tracked pose")
    det0 = min(usable, key=lambda d: d.frame_index)
    pose0 = trajectory[det0.frame_index]

    per_frame: dict[int, list[float]] = {}
    all_errors: list[float] = []
    for det in usable:
        relative = chain_relative(pose0, trajectory[det.frame_index])
        estimated = estimate_marker_at_t0(relative, det)
        try:
            errors = reprojection_error(estimated, marker, det0, k)
        except NonPositiveDepth:
            continue
        per_frame[det.frame_index] = [float(e) for e in errors]
        all_errors.extend(float(e) for e in errors)
    if not all_errors:
        raise EmptyReport("every chained marker pose was behind the camera")
    return ReprojectionReport(branch=marker.target, lcd_enabled=lcd_enabled,
                              errors_px=np.array(all_errors), per_frame=per_frame)


def aggregate(errors, *, branch: str = "", lcd_enabled: bool = False) -> ReprojectionReport:
    """Mean and population std over a flat collection of pixel errors."""
    values = np.asarray(list(errors), dtype=float).ravel()
    if values.size == 0:
        raise EmptyReport("no error values to aggregate")
    return ReprojectionReport(branch=branch, lcd_enabled=lcd_enabled,
                              errors_px=values)


def trajectory_error(
    estimated: dict[int, SE3],
    ground_truth: dict[int, SE3],
) -> dict[str, float]:
    """Translation RMS over frames and the final-frame translation error."""
    if set(estimated) != set(ground_truth):
        raise IndexMismatch("estimated and ground-truth frame sets differ")
    if not estimated:
        raise IndexMismatch("empty trajectories")
    frames = sorted(estimated)
    dists = np.array([
        estimated[f].translation_distance_to(ground_truth[f]) for f in frames
    ])
    return {
        "translation_rms_m": float(np.sqrt(np.mean(dists ** 2))),
        "final_pose_error_m": float(dists[-1]),
    }
