"""Dual-branch 6DoF pose tracking from masked feature observations.

Each context (cabin = ``intra``, road = ``extra``) runs an independent
branch: a landmark map, a per-frame pose solved by Huber-robustified
Gauss-Newton on the reprojection residual, keyframes for relocalization
and loop verification, and optional drift correction when a loop
closure is confirmed.

Poses are stored as branch-from-camera transforms ``T`` (the camera
pose expressed in the branch frame); the solver internally optimizes
the inverse ``W = T^-1`` so residuals are
``project(K, W @ X) - pixel``. Tangent updates are applied as a left
perturbation ``W <- exp(xi) @ W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateBaseline,
    Diverged,
    FrameNotFound,
    InsufficientCorrespondences,
)
from .geometry import SE3, CameraIntrinsics, skew

INTRA = "intra"
EXTRA = "extra"

UNINITIALIZED = "uninitialized"
TRACKING = "tracking"
LOST = "lost"


@dataclass(frozen=True)
class FeatureObservation:
    """One matched image observation inside a branch's context mask.

    ``depth`` is an optional range hint (camera-frame z, meters) from
    adapters that know scale; the branch uses it only when bootstrapping
    the map at its anchor keyframe.
    """

    pixel: np.ndarray  # (2,)
    landmark_id: int | None
    branch: str
    depth: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=float).reshape(2))


@dataclass
class Landmark:
    id: int
    position: np.ndarray  # (3,) branch frame
    first_seen: int
    observation_count: int = 1


@dataclass(frozen=True)
class RansacConfig:
    enabled: bool = False
    inlier_threshold_px: float = 2.0
    max_rounds: int = 100


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    convergence_eps: float = 1e-10
    huber_threshold: float = 2.0
    min_correspondences: int = 6
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def __post_init__(self):
        if min(self.max_iterations, self.convergence_eps, self.huber_threshold,
               self.min_correspondences) <= 0:
            raise ValueError("solver parameters must be positive")


def extract_masked_features(frame, alpha: np.ndarray, adapter) -> list[FeatureObservation]:
    """Feature observations whose pixel falls inside the context mask.

    The adapter produces candidate observations for the frame; anything
    outside the mask (or outside the image) is discarded, so downstream
    consumers can never see an observation off their context.
    """
    alpha = np.asarray(alpha, dtype=bool)
    h, w = alpha.shape
    kept = []
    for obs in adapter.candidates(frame):
        u, v = int(round(obs.pixel[0])), int(round(obs.pixel[1]))
        if 0 <= u < w and 0 <= v < h and alpha[v, u]:
            kept.append(obs)
    return kept


class OracleFeatureAdapter:
    """Replays a synthetic frame's per-branch observation channel."""

    shareable = False  # one instance per branch

    def __init__(self, branch: str):
        self.branch = branch

    def candidates(self, frame):
        return frame.observations[self.branch]


# --- reprojection solver ------------------------------------------------

def reprojection_residual_jacobian(
    cam_from_branch: SE3,
    points: np.ndarray,
    pixels: np.ndarray,
    k: CameraIntrinsics,
):
    """Residuals and Jacobian of the reprojection error.

    Residual r_j = project(K, W @ X_j) - x_j for W = cam_from_branch.
    The Jacobian is taken w.r.t. a left tangent perturbation
    exp([rho, phi]) @ W evaluated at zero, giving per-point 2x6 blocks
    J = J_proj(p) @ [I | -skew(p)] with p the camera-frame point.

    Raises BehindCamera if any point has non-positive depth.
    """
    p = cam_from_branch.apply(points)
    z = p[:, 2]
    if np.any(z <= 0.0):
        raise BehindCamera("point behind camera during pose refinement")
    proj = k.project(p)
    r = proj - pixels

    n = p.shape[0]
    inv_z = 1.0 / z
    j_proj = np.zeros((n, 2, 3))
    j_proj[:, 0, 0] = k.fx * inv_z
    j_proj[:, 0, 2] = -k.fx * p[:, 0] * inv_z ** 2
    j_proj[:, 1, 1] = k.fy * inv_z
    j_proj[:, 1, 2] = -k.fy * p[:, 1] * inv_z ** 2

    dp = np.zeros((n, 3, 6))
    dp[:, :, :3] = np.eye(3)
    dp[:, 0, 4] = p[:, 2]
    dp[:, 0, 5] = -p[:, 1]
    dp[:, 1, 3] = -p[:, 2]
    dp[:, 1, 5] = p[:, 0]
    dp[:, 2, 3] = p[:, 1]
    dp[:, 2, 4] = -p[:, 0]

    jac = np.einsum("nij,njk->nik", j_proj, dp)
    return r, jac


def huber_cost(residuals: np.ndarray, threshold: float) -> float:
    """Total Huber cost over per-point residual norms."""
    e = np.linalg.norm(np.atleast_2d(residuals), axis=-1)
    quad = e <= threshold
    cost = np.where(quad, 0.5 * e ** 2, threshold * e - 0.5 * threshold ** 2)
    return float(cost.sum())


def _huber_weights(e: np.ndarray, threshold: float) -> np.ndarray:
    w = np.ones_like(e)
    big = e > threshold
    w[big] = threshold / e[big]
    return w


def _cost_at(w_pose: SE3, points, pixels, k, threshold) -> float:
    p = w_pose.apply(points)
    if np.any(p[:, 2] <= 0.0):
        return np.inf
    r = k.project(p) - pixels
    return huber_cost(r, threshold)


def refine_pose(
    points: np.ndarray,
    pixels: np.ndarray,
    k: CameraIntrinsics,
    init: SE3,
    cfg: SolverConfig,
    *,
    return_info: bool = False,
):
    """Gauss-Newton refinement of a branch-from-camera pose.

    Steps are accepted only if they do not increase the robustified
    cost; a rejected step is halved up to five times before the solve
    is declared diverged. Returns the refined pose (and an info dict
    with the accepted-cost history when requested).
    """
    w = init.inverse()
    cost = _cost_at(w, points, pixels, k, cfg.huber_threshold)
    if not np.isfinite(cost):
        raise BehindCamera("initial pose puts points behind the camera")
    history = [cost]
    iterations = 0

    for iterations in range(1, cfg.max_iterations + 1):
        r, jac = reprojection_residual_jacobian(w, points, pixels, k)
        e = np.linalg.norm(r, axis=1)
        weights = _huber_weights(np.maximum(e, 1e-12), cfg.huber_threshold)
        jw = jac * weights[:, None, None]
        h = np.einsum("nij,nik->jk", jw, jac)
        g = np.einsum("nij,ni->j", jw, r)
        try:
            delta = np.linalg.solve(h + 1e-12 * np.eye(6), -g)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(h, -g, rcond=None)[0]

        if np.linalg.norm(delta) < cfg.convergence_eps:
            break

        accepted = False
        trial = delta
        for _ in range(5):
            w_trial = SE3.exp(trial) @ w
            trial_cost = _cost_at(w_trial, points, pixels, k, cfg.huber_threshold)
            if trial_cost <= cost:
                w, cost = w_trial, trial_cost
                history.append(cost)
                accepted = True
                break
            trial = 0.5 * trial
        if not accepted:
            raise Diverged(
                f"no cost-decreasing step after 5 halvings (cost {cost:.3e})")

    pose = w.inverse()
    if return_info:
        return pose, {"iterations": iterations, "cost_history": history}
    return pose


def estimate_pose(
    observations,
    landmarks: dict[int, Landmark],
    k: CameraIntrinsics,
    init: SE3,
    cfg: SolverConfig,
    *,
    rng: np.random.Generator | None = None,
    return_info: bool = False,
):
    """Solve the camera pose (branch frame) from matched observations.

    Observations are matched to the map by landmark id. With RANSAC
    enabled, minimal subsets are refined and scored by inlier count
    before the final refinement on the best inlier set.
    """
    matched = [(obs, landmarks[obs.landmark_id]) for obs in observations
               if obs.landmark_id is not None and obs.landmark_id in landmarks]
    if len(matched) < cfg.min_correspondences:
        raise InsufficientCorrespondences(
            f"{len(matched)} matches < minimum {cfg.min_correspondences}")
    pixels = np.array([obs.pixel for obs, _ in matched])
    points = np.array([lm.position for _, lm in matched])

    if not cfg.ransac.enabled:
        return refine_pose(points, pixels, k, init, cfg, return_info=return_info)

    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(matched)
    sample_size = cfg.min_correspondences
    best_inliers: np.ndarray | None = None
    for _ in range(cfg.ransac.max_rounds):
        idx = rng.choice(n, size=sample_size, replace=False)
        try:
            candidate = refine_pose(points[idx], pixels[idx], k, init, cfg)
        except (Diverged, BehindCamera):
            continue
        inliers = _inlier_mask(candidate, points, pixels, k,
                               cfg.ransac.inlier_threshold_px)
        if best_inliers is None or inliers.sum() > best_inliers.sum():
            best_inliers = inliers
    if best_inliers is None or best_inliers.sum() < cfg.min_correspondences:
        raise InsufficientCorrespondences("RANSAC found no usable consensus set")
    return refine_pose(points[best_inliers], pixels[best_inliers], k, init, cfg,
                       return_info=return_info)


def _inlier_mask(pose: SE3, points, pixels, k, threshold) -> np.ndarray:
    p = pose.inverse().apply(points)
    ok = p[:, 2] > 0.0
    out = np.zeros(len(points), dtype=bool)
    if not np.any(ok):
        return out
    proj = k.project(p[ok])
    err = np.linalg.norm(proj - pixels[ok], axis=1)
    out[np.nonzero(ok)[0]] = err <= threshold
    return out


def inlier_count(pose: SE3, observations, landmarks, k, threshold) -> int:
    matched = [(obs, landmarks[obs.landmark_id]) for obs in observations
               if obs.landmark_id is not None and obs.landmark_id in landmarks]
    if not matched:
        return 0
    pixels = np.array([obs.pixel for obs, _ in matched])
    points = np.array([lm.position for _, lm in matched])
    return int(_inlier_mask(pose, points, pixels, k, threshold).sum())


def triangulate(
    obs_a: FeatureObservation,
    obs_b: FeatureObservation,
    pose_a: SE3,
    pose_b: SE3,
    k: CameraIntrinsics,
) -> np.ndarray:
    """Midpoint of closest approach of two back-projected rays.

    Poses are branch-from-camera; the result is in the branch frame.
    """
    baseline = np.linalg.norm(pose_a.translation - pose_b.translation)
    if baseline <= 1e-6:
        raise DegenerateBaseline(f"baseline {baseline:.2e} m too small")

    d_a = pose_a.rotation @ k.back_project(obs_a.pixel, 1.0)
    d_b = pose_b.rotation @ k.back_project(obs_b.pixel, 1.0)
    d_a /= np.linalg.norm(d_a)
    d_b /= np.linalg.norm(d_b)
    o_a, o_b = pose_a.translation, pose_b.translation

    # closest points on the two lines o + s*d
    cross = np.dot(d_a, d_b)
    denom = 1.0 - cross ** 2
    if denom < 1e-12:
        raise DegenerateBaseline("rays are parallel")
    w = o_b - o_a
    s_a = (np.dot(w, d_a) - cross * np.dot(w, d_b)) / denom
    s_b = (cross * np.dot(w, d_a) - np.dot(w, d_b)) / denom
    point = 0.5 * ((o_a + s_a * d_a) + (o_b + s_b * d_b))

    for pose in (pose_a, pose_b):
        if pose.inverse().apply(point)[2] <= 0.0:
            raise BehindCamera("triangulated point behind a camera")
    return point


# --- branch state machine ------------------------------------------------

@dataclass
class Keyframe:
    frame_index: int
    pose: SE3
    observations: dict[int, np.ndarray]  # landmark id -> pixel


@dataclass(frozen=True)
class LoopClosure:
    frame_a: int
    frame_b: int
    relative: SE3  # measured camera_a-from-camera_b


@dataclass(frozen=True)
class OdometryNoise:
    """Per-frame pose perturbation injected after each solve (drift model)."""

    rot_sigma_rad: float = 0.0
    trans_sigma_m: float = 0.0

    @property
    def active(self) -> bool:
        return self.rot_sigma_rad > 0.0 or self.trans_sigma_m > 0.0


class BranchState:
    """One tracking branch: map, trajectory, keyframes, lifecycle status."""

    def __init__(
        self,
        branch: str,
        intrinsics: CameraIntrinsics,
        cfg: SolverConfig,
        *,
        keyframe_interval: int = 10,
        odometry_noise: OdometryNoise | None = None,
        seed: int = 0,
    ):
        self.branch = branch
        self.k = intrinsics
        self.cfg = cfg
        self.keyframe_interval = keyframe_interval
        self.odometry_noise = odometry_noise or OdometryNoise()
        self.landmarks: dict[int, Landmark] = {}
        self.trajectory: dict[int, SE3] = {}
        self.status = UNINITIALIZED
        self.status_by_frame: dict[int, str] = {}
        self.keyframes: list[Keyframe] = []
        self.loop_closures: list[LoopClosure] = []
        self._anchor_frame: int | None = None
        self._rng = np.random.default_rng(seed)

    # -- queries

    @property
    def last_frame(self) -> int | None:
        return max(self.trajectory) if self.trajectory else None

    def keyframe_at(self, frame_index: int) -> Keyframe | None:
        for kf in self.keyframes:
            if kf.frame_index == frame_index:
                return kf
        return None

    # -- stepping

    def step(self, frame_index: int, observations) -> "BranchState":
        """Consume one frame's masked observations for this branch."""
        obs = [o for o in observations if o.branch == self.branch]
        if self.status == UNINITIALIZED:
            self._step_uninitialized(frame_index, obs)
        elif self.status == TRACKING:
            self._step_tracking(frame_index, obs)
        else:
            self._step_lost(frame_index, obs)
        self.status_by_frame[frame_index] = self.status
        return self

    def _step_uninitialized(self, frame_index, obs):
        if self._anchor_frame is None:
            with_depth = [o for o in obs if o.depth is not None and o.landmark_id is not None]
            if len(with_depth) < self.cfg.min_correspondences:
                return
            # the branch frame is anchored at this camera; map bootstrapped
            # from the range hints of the anchor keyframe
            pose0 = SE3.identity()
            for o in with_depth:
                self.landmarks[o.landmark_id] = Landmark(
                    id=o.landmark_id,
                    position=self.k.back_project(o.pixel, o.depth),
                    first_seen=frame_index,
                )
            self.trajectory[frame_index] = pose0
            self._anchor_frame = frame_index
            self._add_keyframe(frame_index, pose0, obs)
            return
        init = self.trajectory[max(self.trajectory)]
        try:
            pose = estimate_pose(obs, self.landmarks, self.k, init, self.cfg,
                                 rng=self._rng)
        except (InsufficientCorrespondences, Diverged, BehindCamera):
            return
        self._record_pose(frame_index, pose, obs)
        self.status = TRACKING

    def _step_tracking(self, frame_index, obs):
        init = self.trajectory[max(self.trajectory)]  # constant-position model
        try:
            pose = estimate_pose(obs, self.landmarks, self.k, init, self.cfg,
                                 rng=self._rng)
        except (InsufficientCorrespondences, Diverged, BehindCamera):
            self.status = LOST
            return
        self._record_pose(frame_index, pose, obs)

    def _step_lost(self, frame_index, obs):
        recent_ids: set[int] = set()
        for kf in self.keyframes[-3:]:
            recent_ids |= set(kf.observations)
        candidates = [o for o in obs if o.landmark_id in recent_ids]
        init = self.trajectory[max(self.trajectory)]
        try:
            pose = estimate_pose(candidates, self.landmarks, self.k, init, self.cfg,
                                 rng=self._rng)
        except (InsufficientCorrespondences, Diverged, BehindCamera):
            return
        self._record_pose(frame_index, pose, obs)
        self.status = TRACKING

    def _record_pose(self, frame_index, pose, obs):
        if self.odometry_noise.active:
            xi = np.concatenate([
                self._rng.normal(0.0, self.odometry_noise.trans_sigma_m, 3),
                self._rng.normal(0.0, self.odometry_noise.rot_sigma_rad, 3),
            ])
            pose = pose @ SE3.exp(xi)
        self.trajectory[frame_index] = pose
        self._grow_map(frame_index, pose, obs)
        last_kf = self.keyframes[-1].frame_index if self.keyframes else -10 ** 9
        if frame_index - last_kf >= self.keyframe_interval:
            self._add_keyframe(frame_index, pose, obs)

    def _add_keyframe(self, frame_index, pose, obs):
        # every observed id is recorded so future frames can triangulate
        # landmarks that were unmapped when this keyframe was created
        seen = {o.landmark_id: o.pixel for o in obs if o.landmark_id is not None}
        self.keyframes.append(Keyframe(frame_index, pose, seen))

    def _grow_map(self, frame_index, pose, obs):
        """Triangulate unmapped landmarks against recent keyframes."""
        if not self.keyframes:
            return
        gate = self.cfg.huber_threshold
        for o in obs:
            if o.landmark_id is None:
                continue
            if o.landmark_id in self.landmarks:
                self.landmarks[o.landmark_id].observation_count += 1
                continue
            ref = self._reference_view(o.landmark_id)
            if ref is None:
                continue
            kf_pose, ref_px = ref
            ref_obs = FeatureObservation(ref_px, o.landmark_id, self.branch)
            try:
                point = triangulate(ref_obs, o, kf_pose, pose, self.k)
            except (DegenerateBaseline, BehindCamera):
                continue
            err = np.linalg.norm(
                self.k.project(pose.inverse().apply(point)) - o.pixel)
            if err > gate:
                continue
            self.landmarks[o.landmark_id] = Landmark(
                id=o.landmark_id, position=point, first_seen=frame_index)

    def _reference_view(self, landmark_id):
        for kf in reversed(self.keyframes[-3:]):
            px = kf.observations.get(landmark_id)
            if px is not None:
                return kf.pose, px
        return None


def loop_closure_correct(state: BranchState, closure: LoopClosure) -> BranchState:
    """Distribute accumulated loop drift over the enclosed frames.

    The drift D = measured^-1 @ (T_a^-1 @ T_b) is spread over frames in
    (a, b] by linear interpolation in the tangent space; frames after b
    receive the full correction so the trajectory stays continuous.
    After correction the relative transform a -> b equals the measured
    one to numerical precision.
    """
    a, b = closure.frame_a, closure.frame_b
    if a not in state.trajectory or b not in state.trajectory:
        raise FrameNotFound(f"loop frames ({a}, {b}) not both in trajectory")
    if not a < b:
        raise ValueError("loop closure requires frame_a < frame_b")

    estimated = state.trajectory[a].inverse() @ state.trajectory[b]
    drift = closure.relative.inverse() @ estimated
    xi = drift.log()
    span = b - a
    for frame in sorted(state.trajectory):
        if frame <= a:
            continue
        s = min((frame - a) / span, 1.0)
        state.trajectory[frame] = state.trajectory[frame] @ SE3.exp(-s * xi)
    state.loop_closures.append(closure)
    return state


def verify_and_close(
    state: BranchState,
    frame_a: int,
    frame_b: int,
    observations,
    *,
    min_inliers: int = 12,
) -> bool:
    """Geometric verification of a loop candidate, then correction.

    The candidate passes when the camera at ``frame_b`` can be located
    against the landmarks seen by the keyframe at ``frame_a`` with
    enough inliers; the verified pose defines the measured relative
    transform used for correction. Returns whether correction ran.
    """
    kf = state.keyframe_at(frame_a)
    if kf is None or frame_b not in state.trajectory:
        return False
    candidates = [o for o in observations
                  if o.branch == state.branch and o.landmark_id in kf.observations]
    try:
        pose_b = estimate_pose(candidates, state.landmarks, state.k,
                               state.trajectory[frame_b], state.cfg,
                               rng=state._rng)
    except (InsufficientCorrespondences, Diverged, BehindCamera):
        return False
    inliers = inlier_count(pose_b, candidates, state.landmarks, state.k,
                           state.cfg.ransac.inlier_threshold_px)
    if inliers < min_inliers:
        return False
    measured = state.trajectory[frame_a].inverse() @ pose_b
    loop_closure_correct(state, LoopClosure(frame_a, frame_b, measured))
    return True
