"""Procedural synthetic egocentric driving sequences with exact ground truth.

One generated frame carries everything the pipeline consumes plus the
truth needed to score it: a flat-shaded RGB render, a quantized depth
map whose near mode comes from a cabin shell 0.4-1.2 m from the camera
and whose far mode is the road backdrop, per-object dynamic masks,
per-branch landmark observations (exact projections before noise),
fiducial-marker detections, vehicle telemetry, and the ground-truth
camera pose in both the cabin and the world frame.

Both branch frames are anchored at the first camera pose, so
ground-truth trajectories start at the identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .depth_context import DepthMap, N_BINS
from .errors import ChecksumMismatch, ManifestError, SpecValidation
from .evaluation import FiducialMarker, MarkerDetection
from .geometry import SE3, CameraIntrinsics, rot_x, rot_y
from .imgio import (
    read_depth_pgm,
    read_mask_pgm,
    read_pgm,
    read_ppm,
    sha256_of,
    write_depth_pgm,
    write_mask_pgm,
    write_pgm8,
    write_ppm,
)
from .recommend import SceneContext, VehicleState
from .tracking import EXTRA, INTRA, FeatureObservation

INTRA_LABEL, EXTRA_LABEL, DYNAMIC_LABEL = 0, 1, 2

FPS = 30.0

DYNAMIC_PALETTE = ((200, 60, 50), (230, 150, 40))
_BACKDROP_COLOR = (90, 96, 110)
_MARKER_FACE = (235, 235, 235)
_MARKER_CORE = (30, 30, 30)


@dataclass(frozen=True)
class BoundedPlane:
    """Rectangle patch: origin plus two orthonormal in-plane axes."""

    origin: tuple
    u_axis: tuple
    v_axis: tuple
    half_u: float
    half_v: float
    color: tuple = (80, 80, 80)

    def arrays(self):
        return (np.asarray(self.origin, dtype=float),
                np.asarray(self.u_axis, dtype=float),
                np.asarray(self.v_axis, dtype=float))


def default_cabin_shell() -> tuple[BoundedPlane, ...]:
    """Partial box shell 0.4-1.2 m ahead: dash, two pillars, headliner."""
    s = np.sin(np.radians(55.0))
    c = np.cos(np.radians(55.0))
    return (
        # tilted dashboard filling the lower image
        BoundedPlane((0.0, 0.32, 0.62), (1.0, 0.0, 0.0), (0.0, c, s),
                     half_u=0.9, half_v=0.27, color=(70, 58, 48)),
        BoundedPlane((-0.42, 0.05, 0.85), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0),
                     half_u=0.35, half_v=0.5, color=(46, 46, 52)),
        BoundedPlane((0.42, 0.05, 0.85), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0),
                     half_u=0.35, half_v=0.5, color=(52, 46, 46)),
        BoundedPlane((0.0, -0.38, 0.72), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                     half_u=0.52, half_v=0.11, color=(58, 56, 60)),
    )


@dataclass(frozen=True)
class NoiseSpec:
    pixel_sigma: float = 0.0
    depth_sigma_bins: float = 0.0
    detection_dropout: float = 0.0
    outlier_rate: float = 0.0
    marker_corner_sigma: float = 0.0

    @classmethod
    def realistic(cls) -> "NoiseSpec":
        return cls(pixel_sigma=0.5, depth_sigma_bins=1.0, detection_dropout=0.05,
                   outlier_rate=0.05, marker_corner_sigma=0.3)


@dataclass(frozen=True)
class DynamicObjectSpec:
    width_px: int
    height_px: int
    u_start: float
    u_speed: float
    v_center: float
    v_amplitude: float
    v_cycles: float


@dataclass(frozen=True)
class TelemetrySpec:
    fuel_start: float = 0.6
    fuel_per_frame: float = 0.0
    speed_kmh: float = 30.0
    dashboard_visible: bool = False


@dataclass(frozen=True)
class HeadMotionSpec:
    """Small smooth in-cabin camera motion, whole cycles over the sequence."""

    yaw_deg: float = 4.0
    pitch_deg: float = 2.0
    sway_m: float = 0.03
    cycles: tuple[int, int, int] = (2, 3, 2)


_PRESET_TABLE = {
    SceneContext.INDOOR_GARAGE: dict(kind="dead_end", frames=500, speed=0.10,
                                     dynamics=1, telemetry=TelemetrySpec(0.8, 0.0, 8.0, False)),
    SceneContext.OUTDOOR_PARKING: dict(kind="loop", frames=700, radius=10.0,
                                       dynamics=1, telemetry=TelemetrySpec(0.8, 0.0, 12.0, False)),
    SceneContext.URBAN_STREET: dict(kind="loop", frames=700, radius=14.0,
                                    dynamics=3, telemetry=TelemetrySpec(0.16, 5e-5, 35.0, False)),
    SceneContext.INTERCITY_ROAD: dict(kind="straight", frames=900, speed=0.35,
                                      dynamics=2, telemetry=TelemetrySpec(0.12, 0.0, 70.0, False)),
    SceneContext.HIGHWAY: dict(kind="straight", frames=900, speed=0.5,
                               dynamics=2, telemetry=TelemetrySpec(0.6, 0.0, 110.0, True)),
}


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=110.0, fy=110.0, cx=64.0, cy=64.0,
                            width=128, height=128)


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to generate one deterministic sequence."""

    context: SceneContext
    n_frames: int
    seed: int = 0
    intrinsics: CameraIntrinsics = field(default_factory=default_intrinsics)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    cabin_landmarks: int = 60
    world_landmarks: int = 280
    dynamic_objects: int = 2
    with_extra_marker: bool = True
    head: HeadMotionSpec = field(default_factory=HeadMotionSpec)
    telemetry: TelemetrySpec = field(default_factory=TelemetrySpec)
    trajectory_kind: str = "straight"   # straight | loop | dead_end
    speed_m_per_frame: float = 0.35
    loop_radius_m: float = 12.0
    dead_end_length_m: float = 20.0
    max_depth_m: float = 16.0
    backdrop_m: float = 12.0
    dynamic_depth_m: float = 8.0

    def __post_init__(self):
        if self.n_frames < 8:
            raise SpecValidation("sequences need at least 8 frames")
        if not 0.0 < self.backdrop_m < self.max_depth_m:
            raise SpecValidation("backdrop must sit inside the depth range")

    @property
    def loop(self) -> bool:
        return self.trajectory_kind == "loop"

    @classmethod
    def preset(cls, context: SceneContext | str, *, n_frames: int | None = None,
               seed: int = 0, noise: NoiseSpec | None = None,
               **overrides) -> "SceneSpec":
        """Scenario preset for one of the five scene kinds."""
        context = SceneContext(context)
        row = _PRESET_TABLE[context]
        kwargs = dict(
            context=context,
            n_frames=n_frames if n_frames is not None else row["frames"],
            seed=seed,
            noise=noise if noise is not None else NoiseSpec(),
            dynamic_objects=row["dynamics"],
            telemetry=row["telemetry"],
            trajectory_kind=row["kind"],
        )
        if row["kind"] == "straight":
            kwargs["speed_m_per_frame"] = row["speed"]
        elif row["kind"] == "loop":
            kwargs["loop_radius_m"] = row["radius"]
        else:
            kwargs["speed_m_per_frame"] = row["speed"]
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class SyntheticFrame:
    index: int
    rgb: np.ndarray
    depth: DepthMap
    dynamic_masks: list            # [(object_id, mask)]
    context_labels: np.ndarray     # (H, W) uint8: 0 intra / 1 extra / 2 dynamic
    observations: dict             # branch -> [FeatureObservation]
    marker_detections: dict        # marker id -> MarkerDetection
    vehicle: VehicleState
    context: SceneContext
    gt_pose_intra: SE3
    gt_pose_extra: SE3


# --- trajectories ---------------------------------------------------------

def head_motion(spec: HeadMotionSpec, n: int) -> list[SE3]:
    """In-cabin camera poses; identity at the first and last frame."""
    tau = np.arange(n) / max(n - 1, 1)
    c1, c2, c3 = spec.cycles
    yaw = np.radians(spec.yaw_deg) * np.sin(2 * np.pi * c1 * tau)
    pitch = np.radians(spec.pitch_deg) * np.sin(2 * np.pi * c2 * tau)
    sway = spec.sway_m * np.sin(2 * np.pi * c3 * tau)
    poses = []
    for i in range(n):
        r = rot_y(yaw[i]) @ rot_x(pitch[i])
        t = np.array([sway[i], 0.5 * sway[i], 0.3 * sway[i]])
        poses.append(SE3(r, t))
    return poses


def trajectory_presets(kind: str, n: int, *, speed: float = 0.35,
                       radius: float = 12.0, length: float = 20.0) -> list[SE3]:
    """Vehicle body poses in the world frame for the given topology.

    Per-frame deltas stay below 5 degrees rotation and 0.5 m translation;
    loop trajectories end exactly where they start.
    """
    tau = np.arange(n) / max(n - 1, 1)
    poses = []
    if kind == "straight":
        step = min(speed, 0.49)
        for i in range(n):
            poses.append(SE3(np.eye(3), np.array([0.0, 0.0, step * i])))
    elif kind == "dead_end":
        length = min(length, 0.3 * (n - 1))
        s = length * np.sin(0.5 * np.pi * tau)
        for i in range(n):
            poses.append(SE3(np.eye(3), np.array([0.0, 0.0, s[i]])))
    elif kind == "loop":
        radius = min(radius, 0.45 * (n - 1) / (2 * np.pi))
        theta = 2 * np.pi * tau
        for i in range(n):
            r = rot_y(theta[i])
            t = np.array([radius * (1 - np.cos(theta[i])), 0.0,
                          radius * np.sin(theta[i])])
            poses.append(SE3(r, t))
    else:
        raise SpecValidation(f"unknown trajectory kind {kind!r}")
    return poses


# --- generation ------------------------------------------------------------

def _sample_cabin_landmarks(planes, count, rng) -> np.ndarray:
    areas = np.array([4.0 * p.half_u * p.half_v for p in planes])
    weights = areas / areas.sum()
    counts = np.floor(weights * count).astype(int)
    counts[0] += count - counts.sum()
    points = []
    for plane, m in zip(planes, counts):
        origin, u, v = plane.arrays()
        a = rng.uniform(-plane.half_u, plane.half_u, m)
        b = rng.uniform(-plane.half_v, plane.half_v, m)
        points.append(origin + a[:, None] * u + b[:, None] * v)
    return np.concatenate(points, axis=0)


def _sample_world_landmarks(vehicle_poses, count, rng) -> np.ndarray:
    n = len(vehicle_poses)
    points = []
    for _ in range(count):
        t_ref = int(rng.integers(0, n))
        lateral = rng.uniform(3.0, 12.0) * rng.choice([-1.0, 1.0])
        height = rng.uniform(-4.0, 1.0)
        ahead = rng.uniform(5.0, 60.0)
        local = np.array([lateral, height, ahead])
        points.append(vehicle_poses[t_ref].apply(local))
    return np.array(points)


def _make_dynamic_specs(spec: SceneSpec, rng) -> list[DynamicObjectSpec]:
    out = []
    for _ in range(spec.dynamic_objects):
        out.append(DynamicObjectSpec(
            width_px=int(rng.integers(14, 24)),
            height_px=int(rng.integers(9, 15)),
            u_start=float(rng.uniform(-40.0, 20.0)),
            u_speed=float(rng.uniform(0.25, 0.7)),
            v_center=float(rng.uniform(32.0, 58.0)),
            v_amplitude=float(rng.uniform(0.0, 6.0)),
            v_cycles=float(rng.integers(1, 4)),
        ))
    return out


def build_markers(spec: SceneSpec) -> list[FiducialMarker]:
    """One cabin marker on the dashboard; one stationary world marker."""
    dash = default_cabin_shell()[0]
    origin, u, v = dash.arrays()
    center = origin + 0.35 * u
    normal = np.cross(u, v)
    r = np.column_stack([u, -v, -normal])
    markers = [FiducialMarker(id=0, side_length=0.16,
                              placement=SE3(r, center), target=INTRA)]
    if spec.with_extra_marker:
        if spec.trajectory_kind == "loop":
            position = np.array([2.0, -0.5, 10.0])
            side = 0.6
        else:
            position = np.array([2.5, -1.2, 30.0])
            side = 1.2
        markers.append(FiducialMarker(
            id=1, side_length=side,
            placement=SE3(rot_y(np.pi), position), target=EXTRA))
    return markers


def _quad_mask(corners_px: np.ndarray, shape) -> np.ndarray:
    """Filled convex quadrilateral; corners in order around the polygon."""
    h, w = shape
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    inside = np.ones(shape, dtype=bool)
    m = len(corners_px)
    # consistent winding: flip if signed area is negative
    area = 0.0
    for i in range(m):
        ax, ay = corners_px[i]
        bx, by = corners_px[(i + 1) % m]
        area += ax * by - bx * ay
    pts = corners_px if area >= 0 else corners_px[::-1]
    for i in range(m):
        ax, ay = pts[i]
        bx, by = pts[(i + 1) % m]
        inside &= (bx - ax) * (vv - ay) - (by - ay) * (uu - ax) >= 0.0
    return inside


def generate_sequence(spec: SceneSpec) -> tuple[list[SyntheticFrame], dict]:
    """Generate all frames plus the sequence manifest.

    Deterministic under the spec seed; every ground-truth channel is
    mutually consistent (observations are exact projections of the
    landmark set through the ground-truth poses before noise is added).
    """
    rng = np.random.default_rng(spec.seed)
    k = spec.intrinsics
    n = spec.n_frames
    h, w = k.height, k.width

    heads = head_motion(spec.head, n)
    vehicles = trajectory_presets(
        spec.trajectory_kind, n, speed=spec.speed_m_per_frame,
        radius=spec.loop_radius_m, length=spec.dead_end_length_m)
    gt_intra = heads
    gt_extra = [vehicles[i] @ heads[i] for i in range(n)]

    planes = default_cabin_shell()
    cabin_points = _sample_cabin_landmarks(planes, spec.cabin_landmarks, rng)
    world_points = _sample_world_landmarks(vehicles, spec.world_landmarks, rng)
    dyn_specs = _make_dynamic_specs(spec, rng)
    markers = build_markers(spec)

    dirs = k.ray_directions()
    frames = []
    for i in range(n):
        frames.append(_render_frame(
            spec, i, k, dirs, planes, cabin_points, world_points,
            dyn_specs, markers, gt_intra[i], gt_extra[i], rng))

    manifest = {
        "format": "egoar-sequence-v1",
        "context": spec.context.value,
        "n": n,
        "seed": spec.seed,
        "loop": spec.loop,
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                       "width": k.width, "height": k.height},
        "noise": asdict(spec.noise),
        "max_depth_m": spec.max_depth_m,
        "channels": ["rgb", "depth", "dynamic_masks", "observations",
                     "telemetry", "markers"],
        "markers": [
            {"id": m.id, "side_length": m.side_length, "target": m.target,
             "placement": m.placement.as_flat()} for m in markers
        ],
        "gt_poses": {
            INTRA: [p.as_flat() for p in gt_intra],
            EXTRA: [p.as_flat() for p in gt_extra],
        },
        "loop_pairs": [[0, n - 1]] if spec.loop else [],
        "spec": {
            "context": spec.context.value,
            "trajectory_kind": spec.trajectory_kind,
            "n_frames": n,
            "seed": spec.seed,
            "cabin_landmarks": spec.cabin_landmarks,
            "world_landmarks": spec.world_landmarks,
            "dynamic_objects": spec.dynamic_objects,
            "with_extra_marker": spec.with_extra_marker,
        },
    }
    return frames, manifest


def _render_frame(spec, i, k, dirs, planes, cabin_points, world_points,
                  dyn_specs, markers, pose_intra, pose_extra, rng):
    h, w = k.height, k.width
    n = spec.n_frames
    cam_from_intra = pose_intra.inverse()
    cam_from_extra = pose_extra.inverse()

    # depth + cabin labels from ray-plane intersection in the camera frame
    depth_m = np.full((h, w), spec.backdrop_m)
    plane_hit = np.full((h, w), -1, dtype=np.int8)
    for pi, plane in enumerate(planes):
        origin, u_ax, v_ax = plane.arrays()
        p0 = cam_from_intra.apply(origin)
        u_c = cam_from_intra.rotation @ u_ax
        v_c = cam_from_intra.rotation @ v_ax
        normal = np.cross(u_c, v_c)
        denom = dirs @ normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-9, (p0 @ normal) / denom, -1.0)
        hit = t[..., None] * dirs - p0
        inside = ((t > 0.05)
                  & (np.abs(hit @ u_c) <= plane.half_u)
                  & (np.abs(hit @ v_c) <= plane.half_v)
                  & (t < depth_m))
        depth_m = np.where(inside, t, depth_m)
        plane_hit = np.where(inside, np.int8(pi), plane_hit)
    cabin_mask = plane_hit >= 0

    # rgb base
    rgb = np.empty((h, w, 3), dtype=np.uint8)
    rgb[:] = _BACKDROP_COLOR
    for pi, plane in enumerate(planes):
        rgb[plane_hit == pi] = plane.color

    # markers drawn before dynamics; detections synthesized from poses
    marker_quads = np.zeros((h, w), dtype=bool)
    detections = {}
    for marker in markers:
        branch_pose = pose_intra if marker.target == INTRA else pose_extra
        cam_from_marker = branch_pose.inverse() @ marker.placement
        corners_cam = cam_from_marker.apply(marker.corners())
        if np.any(corners_cam[:, 2] <= 0.3):
            continue
        corners_px = k.project(corners_cam)
        if not np.all(k.contains(corners_px)):
            continue
        quad = _quad_mask(corners_px, (h, w))
        core = _quad_mask(k.project(cam_from_marker.apply(0.5 * marker.corners())),
                          (h, w))
        rgb[quad] = _MARKER_FACE
        rgb[quad & core] = _MARKER_CORE
        marker_quads |= quad
        if spec.noise.detection_dropout > 0.0 and rng.random() < spec.noise.detection_dropout:
            continue
        noisy = corners_px + (rng.normal(0.0, spec.noise.marker_corner_sigma,
                                         corners_px.shape)
                              if spec.noise.marker_corner_sigma > 0 else 0.0)
        detections[marker.id] = MarkerDetection(
            frame_index=i, pose=cam_from_marker, corner_pixels=noisy)

    # dynamic objects: striped rectangles on image-plane paths, clipped to
    # the road region and kept off the fiducial markers
    tau = i / max(n - 1, 1)
    dynamic_masks = []
    dyn_union = np.zeros((h, w), dtype=bool)
    for oid, d in enumerate(dyn_specs):
        cu = d.u_start + d.u_speed * i
        cv = d.v_center + d.v_amplitude * np.sin(2 * np.pi * d.v_cycles * tau)
        r0 = int(round(cv - d.height_px / 2))
        c0 = int(round(cu - d.width_px / 2))
        mask = np.zeros((h, w), dtype=bool)
        rr0, rr1 = max(r0, 0), min(r0 + d.height_px, h)
        cc0, cc1 = max(c0, 0), min(c0 + d.width_px, w)
        if rr0 < rr1 and cc0 < cc1:
            mask[rr0:rr1, cc0:cc1] = True
        mask &= ~cabin_mask
        mask &= ~marker_quads
        dynamic_masks.append((oid, mask))
        dyn_union |= mask
        if np.any(mask):
            cols = np.nonzero(mask)
            stripe = ((cols[1] // 3) % 2).astype(bool)
            colors = np.where(stripe[:, None], np.array(DYNAMIC_PALETTE[1]),
                              np.array(DYNAMIC_PALETTE[0]))
            rgb[cols] = colors.astype(np.uint8)
    depth_m = np.where(dyn_union, spec.dynamic_depth_m, depth_m)

    labels = np.full((h, w), EXTRA_LABEL, dtype=np.uint8)
    labels[cabin_mask] = INTRA_LABEL
    labels[dyn_union] = DYNAMIC_LABEL

    bins = np.floor(np.clip(depth_m / spec.max_depth_m, 0.0, 1.0)
                    * (N_BINS - 1))
    if spec.noise.depth_sigma_bins > 0.0:
        bins = bins + rng.normal(0.0, spec.noise.depth_sigma_bins, bins.shape)
    depth = DepthMap(np.clip(np.rint(bins), 0, 255).astype(np.uint8))

    observations = {
        INTRA: _observe(cabin_points, 0, pose_intra, k, labels, INTRA_LABEL,
                        INTRA, 0.05, spec.noise, rng),
        EXTRA: _observe(world_points, 10_000, pose_extra, k, labels, EXTRA_LABEL,
                        EXTRA, 1.5, spec.noise, rng),
    }

    t = spec.telemetry
    vehicle = VehicleState(
        fuel_fraction=float(np.clip(t.fuel_start - t.fuel_per_frame * i, 0.02, 1.0)),
        speed_kmh=t.speed_kmh,
        driving_time_min=i / FPS / 60.0,
        dashboard_visible=t.dashboard_visible,
    )

    return SyntheticFrame(
        index=i, rgb=rgb, depth=depth, dynamic_masks=dynamic_masks,
        context_labels=labels, observations=observations,
        marker_detections=detections, vehicle=vehicle, context=spec.context,
        gt_pose_intra=pose_intra, gt_pose_extra=pose_extra,
    )


def _observe(points, id_base, branch_pose, k, labels, wanted_label, branch,
             min_z, noise, rng) -> list[FeatureObservation]:
    """Exact landmark projections filtered by visibility, then noised."""
    h, w = labels.shape
    cam = branch_pose.inverse().apply(points)
    out = []
    for idx in range(len(points)):
        z = cam[idx, 2]
        if z < min_z:
            continue
        px = k.project(cam[idx])
        u, v = int(round(px[0])), int(round(px[1]))
        if not (0 <= u < w and 0 <= v < h):
            continue
        if labels[v, u] != wanted_label:
            continue
        if noise.detection_dropout > 0.0 and rng.random() < noise.detection_dropout:
            continue
        pixel = px
        if noise.outlier_rate > 0.0 and rng.random() < noise.outlier_rate:
            pixel = np.array([rng.uniform(0, w - 1), rng.uniform(0, h - 1)])
        elif noise.pixel_sigma > 0.0:
            pixel = px + rng.normal(0.0, noise.pixel_sigma, 2)
        out.append(FeatureObservation(pixel=pixel, landmark_id=id_base + idx,
                                      branch=branch, depth=float(z)))
    return out


# --- persistence -----------------------------------------------------------

def save_sequence(frames: list[SyntheticFrame], manifest: dict, out_dir) -> Path:
    """Write the sequence directory: frames, JSONL channels, manifest."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)

    per_frame_files = []
    obs_lines, telemetry_lines, marker_lines = [], [], []
    for f in frames:
        names = {"rgb": f"frames/rgb_{f.index:05d}.ppm",
                 "depth": f"frames/depth_{f.index:05d}.pgm",
                 "labels": f"frames/labels_{f.index:05d}.pgm",
                 "dynamic": []}
        write_ppm(out / names["rgb"], f.rgb)
        write_depth_pgm(out / names["depth"], f.depth.bins)
        write_pgm8(out / names["labels"], f.context_labels)
        for oid, mask in f.dynamic_masks:
            name = f"frames/dyn_{f.index:05d}_{oid}.pgm"
            write_mask_pgm(out / name, mask)
            names["dynamic"].append({"object_id": oid, "file": name})
        per_frame_files.append(names)

        obs_lines.append(json.dumps({
            "frame": f.index,
            INTRA: [_obs_to_list(o) for o in f.observations[INTRA]],
            EXTRA: [_obs_to_list(o) for o in f.observations[EXTRA]],
        }, sort_keys=True))
        telemetry_lines.append(json.dumps({
            "frame": f.index, "context": f.context.value,
            **f.vehicle.as_dict(),
        }, sort_keys=True))
        marker_lines.append(json.dumps({
            "frame": f.index,
            "detections": [
                {"marker": mid, "pose": det.pose.as_flat(),
                 "corners": det.corner_pixels.tolist()}
                for mid, det in sorted(f.marker_detections.items())
            ],
        }, sort_keys=True))

    (out / "observations.jsonl").write_text("\n".join(obs_lines) + "\n")
    (out / "telemetry.jsonl").write_text("\n".join(telemetry_lines) + "\n")
    (out / "markers.jsonl").write_text("\n".join(marker_lines) + "\n")

    manifest = dict(manifest)
    manifest["frames"] = per_frame_files
    checksums = {}
    for name in ["observations.jsonl", "telemetry.jsonl", "markers.jsonl"]:
        checksums[name] = sha256_of(out / name)
    for names in per_frame_files:
        for key in ("rgb", "depth", "labels"):
            checksums[names[key]] = sha256_of(out / names[key])
        for entry in names["dynamic"]:
            checksums[entry["file"]] = sha256_of(out / entry["file"])
    manifest["checksums"] = checksums
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return out


def _obs_to_list(o: FeatureObservation) -> list:
    return [float(o.pixel[0]), float(o.pixel[1]), o.landmark_id,
            None if o.depth is None else float(o.depth)]


def load_manifest(seq_dir) -> dict:
    path = Path(seq_dir) / "manifest.json"
    if not path.exists():
        raise ManifestError(f"no manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    required = {"format", "n", "intrinsics", "frames", "checksums", "gt_poses",
                "markers", "context", "channels"}
    missing = required - set(manifest)
    if missing:
        raise ManifestError(f"manifest missing keys: {sorted(missing)}")
    for channel in ("rgb", "depth", "observations", "telemetry", "markers"):
        if channel not in manifest["channels"]:
            raise ManifestError(f"manifest missing channel {channel!r}")
    return manifest


def load_sequence(seq_dir, *, verify: bool = True) -> tuple[list[SyntheticFrame], dict]:
    """Read a saved sequence back; bit-exact inverse of save_sequence."""
    seq_dir = Path(seq_dir)
    manifest = load_manifest(seq_dir)
    if verify:
        for name, expected in manifest["checksums"].items():
            actual = sha256_of(seq_dir / name)
            if actual != expected:
                raise ChecksumMismatch(f"{name}: {actual} != {expected}")

    ki = manifest["intrinsics"]
    intrinsics = CameraIntrinsics(fx=ki["fx"], fy=ki["fy"], cx=ki["cx"],
                                  cy=ki["cy"], width=ki["width"], height=ki["height"])
    context = SceneContext(manifest["context"])

    obs_rows = _read_jsonl(seq_dir / "observations.jsonl")
    tel_rows = _read_jsonl(seq_dir / "telemetry.jsonl")
    marker_rows = _read_jsonl(seq_dir / "markers.jsonl")

    frames = []
    for i, names in enumerate(manifest["frames"]):
        rgb = read_ppm(seq_dir / names["rgb"])
        depth = DepthMap(read_depth_pgm(seq_dir / names["depth"]))
        dynamic = [(entry["object_id"], read_mask_pgm(seq_dir / entry["file"]))
                   for entry in names["dynamic"]]
        observations = {
            branch: [FeatureObservation(
                pixel=np.array(row[:2]), landmark_id=row[2], branch=branch,
                depth=row[3]) for row in obs_rows[i][branch]]
            for branch in (INTRA, EXTRA)
        }
        detections = {
            entry["marker"]: MarkerDetection(
                frame_index=i, pose=SE3.from_flat(entry["pose"]),
                corner_pixels=np.array(entry["corners"]))
            for entry in marker_rows[i]["detections"]
        }
        tel = tel_rows[i]
        vehicle = VehicleState(
            fuel_fraction=tel["fuel_fraction"], speed_kmh=tel["speed_kmh"],
            driving_time_min=tel["driving_time_min"],
            dashboard_visible=tel["dashboard_visible"])
        pose_intra = SE3.from_flat(manifest["gt_poses"][INTRA][i])
        pose_extra = SE3.from_flat(manifest["gt_poses"][EXTRA][i])
        labels = read_pgm(seq_dir / names["labels"]).astype(np.uint8)

        frames.append(SyntheticFrame(
            index=i, rgb=rgb, depth=depth, dynamic_masks=dynamic,
            context_labels=labels, observations=observations,
            marker_detections=detections, vehicle=vehicle, context=context,
            gt_pose_intra=pose_intra, gt_pose_extra=pose_extra,
        ))
    return frames, manifest


def markers_from_manifest(manifest: dict) -> list[FiducialMarker]:
    return [FiducialMarker(id=m["id"], side_length=m["side_length"],
                           placement=SE3.from_flat(m["placement"]),
                           target=m["target"])
            for m in manifest["markers"]]


def gt_trajectory(manifest: dict, branch: str) -> dict[int, SE3]:
    return {i: SE3.from_flat(flat)
            for i, flat in enumerate(manifest["gt_poses"][branch])}


def _read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]
