"""Rigid transforms and the pinhole camera model.

Conventions used throughout the package:

* right-handed frames; camera axes are x right, y down, z forward
* a transform ``T_AB`` maps points expressed in frame B into frame A via
  ``p_A = R @ p_B + t``
* pixel coordinates are (u, v) with u along image columns
* tangent (twist) vectors are 6-vectors ``[rho, phi]`` with the
  translational part first and the rotation in angle-axis form

``SE3`` instances are immutable values and safe to share between threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth

# rotation matrices are re-projected onto SO(3) above this residual and
# rejected as garbage above the second one
_ORTHO_FIX_TOL = 1e-7
_ORTHO_REJECT_TOL = 1e-3

_SMALL_ANGLE = 1e-9


def _orthonormality_residual(r: np.ndarray) -> float:
    return float(np.abs(r.T @ r - np.eye(3)).max())


def nearest_rotation(r: np.ndarray) -> np.ndarray:
    """Polar projection of a near-rotation matrix onto SO(3)."""
    u, _, vt = np.linalg.svd(r)
    rot = u @ vt
    if np.linalg.det(rot) < 0.0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        rot = u @ vt
    return rot


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rotation matrix for an angle-axis 3-vector (Rodrigues)."""
    phi = np.asarray(phi, dtype=float)
    angle = float(np.linalg.norm(phi))
    k = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    s = np.sin(angle) / angle
    c = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + s * k + c * (k @ k)


def so3_log(r: np.ndarray) -> np.ndarray:
    """Angle-axis 3-vector of a rotation matrix."""
    cos_angle = np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)
    angle = float(np.arccos(cos_angle))
    if angle < _SMALL_ANGLE:
        return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if np.pi - angle < 1e-6:
        # near pi the off-diagonal difference vanishes; recover axis from R + I
        m = 0.5 * (r + np.eye(3))
        axis = np.sqrt(np.maximum(np.diag(m), 0.0))
        i = int(np.argmax(axis))
        if axis[i] > 0.0:
            axis = m[:, i] / axis[i]
            axis /= np.linalg.norm(axis)
        return angle * axis
    scale = angle / (2.0 * np.sin(angle))
    return scale * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])


def _so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(phi))
    k = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    a = (1.0 - np.cos(angle)) / (angle * angle)
    b = (angle - np.sin(angle)) / (angle ** 3)
    return np.eye(3) + a * k + b * (k @ k)


def _so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(phi))
    k = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 12.0
    half = 0.5 * angle
    cot = half / np.tan(half)
    return np.eye(3) - 0.5 * k + (1.0 - cot) / (angle * angle) * (k @ k)


@dataclass(frozen=True)
class SE3:
    """Rigid transform: 3x3 rotation plus 3-vector translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        residual = _orthonormality_residual(r)
        if residual > _ORTHO_REJECT_TOL or np.linalg.det(r) < 0.0:
            raise ValueError(f"not a rotation matrix (residual {residual:.2e})")
        if residual > _ORTHO_FIX_TOL:
            r = nearest_rotation(r)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def exp(cls, xi: np.ndarray) -> "SE3":
        """Exponential map of a twist ``[rho, phi]``."""
        xi = np.asarray(xi, dtype=float).reshape(6)
        rho, phi = xi[:3], xi[3:]
        return cls(so3_exp(phi), _so3_left_jacobian(phi) @ rho)

    def log(self) -> np.ndarray:
        """Twist ``[rho, phi]`` such that ``SE3.exp(xi) == self``."""
        phi = so3_log(self.rotation)
        rho = _so3_left_jacobian_inv(phi) @ self.translation
        return np.concatenate([rho, phi])

    def compose(self, other: "SE3") -> "SE3":
        """Transform applying ``other`` first, then ``self``."""
        return SE3(self.rotation @ other.rotation,
                   self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "SE3") -> "SE3":
        return self.compose(other)

    def inverse(self) -> "SE3":
        rt = self.rotation.T
        return SE3(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to a (3,) point or an (N, 3) batch."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def rotation_angle_to(self, other: "SE3") -> float:
        """Geodesic rotation distance in radians."""
        return float(np.linalg.norm(so3_log(self.rotation.T @ other.rotation)))

    def translation_distance_to(self, other: "SE3") -> float:
        return float(np.linalg.norm(self.translation - other.translation))

    def as_flat(self) -> list[float]:
        """12 row-major numbers, rotation rows then translation."""
        return [*self.rotation.reshape(-1).tolist(), *self.translation.tolist()]

    @classmethod
    def from_flat(cls, values) -> "SE3":
        values = np.asarray(values, dtype=float).reshape(12)
        return cls(values[:9].reshape(3, 3), values[9:])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def project(self, p_cam: np.ndarray) -> np.ndarray:
        """Project camera-frame points to pixels; depth must be positive.

        Accepts a (3,) point or an (N, 3) batch and returns matching
        (2,) / (N, 2) pixel coordinates. Pixels may land outside the
        image; culling is the caller's decision.
        """
        p = np.asarray(p_cam, dtype=float)
        z = p[..., 2]
        if np.any(z <= 0.0):
            raise NonPositiveDepth("projection requires z > 0")
        u = self.fx * p[..., 0] / z + self.cx
        v = self.fy * p[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def back_project(self, pixel: np.ndarray, depth) -> np.ndarray:
        """Lift pixels to camera-frame points at the given depth (z, meters)."""
        depth = np.asarray(depth, dtype=float)
        if np.any(depth <= 0.0):
            raise NonPositiveDepth("back-projection requires depth > 0")
        px = np.asarray(pixel, dtype=float)
        x = (px[..., 0] - self.cx) / self.fx * depth
        y = (px[..., 1] - self.cy) / self.fy * depth
        return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)

    def ray_directions(self) -> np.ndarray:
        """Unit-depth ray directions for every pixel center, shape (H, W, 3)."""
        u = np.arange(self.width, dtype=float)
        v = np.arange(self.height, dtype=float)
        uu, vv = np.meshgrid(u, v)
        x = (uu - self.cx) / self.fx
        y = (vv - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def contains(self, pixel: np.ndarray) -> np.ndarray:
        px = np.asarray(pixel, dtype=float)
        u, v = px[..., 0], px[..., 1]
        return (u >= 0.0) & (u <= self.width - 1) & (v >= 0.0) & (v <= self.height - 1)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned image-space box, pixel coordinates."""

    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if self.u_min > self.u_max or self.v_min > self.v_max:
            raise ValueError("bounding box corners out of order")

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max))

    @property
    def width(self) -> float:
        return self.u_max - self.u_min

    @property
    def height(self) -> float:
        return self.v_max - self.v_min

    def contains(self, u, v) -> np.ndarray:
        return ((np.asarray(u) >= self.u_min) & (np.asarray(u) <= self.u_max)
                & (np.asarray(v) >= self.v_min) & (np.asarray(v) <= self.v_max))

    def clamped(self, width: int, height: int) -> "BoundingBox":
        return BoundingBox(
            float(np.clip(self.u_min, 0, width - 1)),
            float(np.clip(self.v_min, 0, height - 1)),
            float(np.clip(self.u_max, 0, width - 1)),
            float(np.clip(self.v_max, 0, height - 1)),
        )

    def as_list(self) -> list[float]:
        return [self.u_min, self.v_min, self.u_max, self.v_max]

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "BoundingBox":
        rows, cols = np.nonzero(mask)
        if rows.size == 0:
            raise ValueError("empty mask has no bounding box")
        return cls(float(cols.min()), float(rows.min()),
                   float(cols.max()), float(rows.max()))
