"""Camera models, quaternion pose algebra and (un)projection.

Conventions used throughout the package:

* Poses are camera-to-world: ``X_world = R @ X_cam + t``.
* Quaternions are stored ``(w, x, y, z)``.
* Camera axes: +x right, +y down, +z forward (optical axis).
* Pixel ``(u, v)`` has its origin at the center of the top-left pixel,
  +u to the right and +v down.
* Depth is z-depth for perspective cameras and ray range for the fisheye
  and equirectangular models.

Every function accepts batched inputs of shape ``(..., 3)`` / ``(..., 2)``
in addition to single vectors.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from stab.errors import OutOfDomain

EPS_Z = 1e-9
UNIT_TOL = 1e-9


class CameraModel(str, enum.Enum):
    PERSPECTIVE = "perspective"
    FISHEYE = "fisheye"
    EQUIRECTANGULAR = "equirectangular"

    @classmethod
    def parse(cls, value: "str | CameraModel") -> "CameraModel":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown camera model {value!r} (expected one of {names})") from None


class Direction(enum.Enum):
    WORLD_TO_CAM = "world_to_cam"
    CAM_TO_WORLD = "cam_to_world"


@dataclass(frozen=True)
class CameraIntrinsics:
    """Intrinsics of one camera. ``fx``/``fy`` are ignored for equirectangular."""

    model: CameraModel
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "model", CameraModel.parse(self.model))
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if self.model is not CameraModel.EQUIRECTANGULAR and not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive for {self.model.value}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def with_model(self, model: "str | CameraModel") -> "CameraIntrinsics":
        return replace(self, model=CameraModel.parse(model))

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# quaternions


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b`` (rotation ``b`` applied first)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) of a single rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return -q if q[0] < 0 else q


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def quat_from_rotvec(rv) -> np.ndarray:
    rv = np.asarray(rv, dtype=np.float64)
    angle = float(np.linalg.norm(rv))
    if angle < 1e-15:
        return quat_normalize(np.concatenate([[1.0], 0.5 * rv]))
    return quat_from_axis_angle(rv / angle, angle)


def quat_angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation angle in radians between two orientations (sign-agnostic)."""
    rel = quat_multiply(quat_conjugate(a), b)
    vec = np.linalg.norm(rel[..., 1:], axis=-1)
    return 2.0 * np.arctan2(vec, np.abs(rel[..., 0]))


# ---------------------------------------------------------------------------
# poses


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.array(self.q, dtype=np.float64).reshape(4)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > UNIT_TOL:
            raise ValueError(f"pose quaternion is not unit (norm={norm!r})")
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_qt(cls, q, t) -> "Pose":
        """Build a pose, normalizing ``q`` first."""
        return cls(quat_normalize(q), t)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(quat_from_matrix(m[:3, :3]), m[:3, 3])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.t
        return m

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.q)
        return Pose.from_qt(qi, -(quat_to_matrix(qi) @ self.t))

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose.from_qt(quat_multiply(self.q, other.q), self.rotation @ other.t + self.t)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.q, other.q) and np.array_equal(self.t, other.t)

    def __repr__(self):
        return f"Pose(q={self.q.tolist()}, t={self.t.tolist()})"


def transform_point(p, pose: Pose, direction: Direction = Direction.WORLD_TO_CAM) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    r = pose.rotation
    if direction is Direction.CAM_TO_WORLD:
        return p @ r.T + pose.t
    return (p - pose.t) @ r


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Pose of camera ``b`` expressed in the frame of camera ``a``."""
    ra = a.rotation
    q = quat_multiply(quat_conjugate(a.q), b.q)
    return Pose.from_qt(q, ra.T @ (b.t - a.t))


# ---------------------------------------------------------------------------
# projection


def project_points(points, cam: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points.

    Returns ``(uv, ok)`` where ``uv`` has shape ``(..., 2)`` and ``ok`` flags
    points inside the model's domain. ``uv`` is NaN where ``ok`` is false.
    """
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        if cam.model is CameraModel.PERSPECTIVE:
            ok = z > EPS_Z
            u = cam.fx * x / z + cam.cx
            v = cam.fy * y / z + cam.cy
        elif cam.model is CameraModel.FISHEYE:
            rho = np.hypot(x, y)
            ok = (rho > 0) | (z > 0)
            theta = np.arctan2(rho, z)
            scale = np.where(rho > 0, theta / np.where(rho > 0, rho, 1.0), 0.0)
            u = cam.cx + cam.fx * scale * x
            v = cam.cy + cam.fy * scale * y
        else:
            rng = np.sqrt(x * x + y * y + z * z)
            ok = rng > 0
            lon = np.arctan2(x, z)
            lat = np.arcsin(np.clip(y / rng, -1.0, 1.0))
            # wrap the seam so that u lies in [0, width)
            u = np.mod(lon / (2 * np.pi) + 0.5, 1.0) * cam.width
            # +y (down) maps to larger v, matching the other two models
            v = (0.5 + lat / np.pi) * cam.height
    uv = np.stack([u, v], axis=-1)
    uv = np.where(ok[..., None], uv, np.nan)
    return uv, ok


def unproject_pixels(uv, depth, cam: CameraIntrinsics) -> np.ndarray:
    """Lift pixels to camera-frame points. ``depth`` broadcasts against ``uv[..., 0]``."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    u, v = uv[..., 0], uv[..., 1]
    if cam.model is CameraModel.PERSPECTIVE:
        ray = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    elif cam.model is CameraModel.FISHEYE:
        dx = (u - cam.cx) / cam.fx
        dy = (v - cam.cy) / cam.fy
        theta = np.hypot(dx, dy)
        s = np.sinc(theta / np.pi)  # sin(theta) / theta
        ray = np.stack([s * dx, s * dy, np.cos(theta)], axis=-1)
    else:
        lon = (u / cam.width - 0.5) * 2 * np.pi
        lat = (v / cam.height - 0.5) * np.pi
        cl = np.cos(lat)
        ray = np.stack([cl * np.sin(lon), np.sin(lat), cl * np.cos(lon)], axis=-1)
    return ray * depth[..., None]


def project(point_cam, cam: CameraIntrinsics) -> np.ndarray:
    """Project a single camera-frame point; raises OutOfDomain outside the model's domain."""
    p = np.asarray(point_cam, dtype=np.float64).reshape(3)
    if not np.any(p):
        raise OutOfDomain("cannot project the zero vector")
    uv, ok = project_points(p, cam)
    if not ok:
        raise OutOfDomain(f"point {p.tolist()} is behind the {cam.model.value} camera")
    return uv


def unproject(pixel, depth: float, cam: CameraIntrinsics) -> np.ndarray:
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth!r}")
    return unproject_pixels(np.asarray(pixel, dtype=np.float64).reshape(2), depth, cam)


def pixel_grid(height: int, width: int) -> np.ndarray:
    """Integer pixel centers as an ``(H, W, 2)`` array of ``(u, v)``."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def depth_of(points_cam, model: CameraModel) -> np.ndarray:
    """Depth value under ``model``'s convention (z for perspective, range otherwise)."""
    p = np.asarray(points_cam, dtype=np.float64)
    if CameraModel.parse(model) is CameraModel.PERSPECTIVE:
        return p[..., 2]
    return np.linalg.norm(p, axis=-1)
