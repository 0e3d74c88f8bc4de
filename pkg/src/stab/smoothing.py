"""Gaussian camera-path smoothing of translations and sign-aligned quaternions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from stab.errors import DegenerateRotation
from stab.geometry import Pose

DEGENERATE_NORM = 1e-6


@dataclass(frozen=True)
class Trajectory:
    poses: tuple
    fps: float = 30.0

    def __post_init__(self):
        poses = tuple(self.poses)
        if not poses:
            raise ValueError("a trajectory needs at least one pose")
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return len(self.poses)

    @property
    def quaternions(self) -> np.ndarray:
        return np.stack([p.q for p in self.poses])

    @property
    def translations(self) -> np.ndarray:
        return np.stack([p.t for p in self.poses])

    @classmethod
    def from_arrays(cls, quats, trans, fps: float = 30.0) -> "Trajectory":
        return cls(tuple(Pose.from_qt(q, t) for q, t in zip(quats, trans)), fps)


@dataclass(frozen=True)
class SmoothingParams:
    sigma: float = 8.0
    radius: int | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma!r}")
        if self.radius is not None and self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius!r}")

    @property
    def r(self) -> int:
        """Temporal radius; ``ceil(3 sigma)`` unless set explicitly."""
        if self.radius is None:
            return int(math.ceil(3.0 * self.sigma))
        return int(self.radius)


def window_bounds(k: int, radius: int, n: int) -> tuple[int, int]:
    """Inclusive window ``[k - r, k + r]`` clamped to ``[0, n - 1]``."""
    return max(0, k - radius), min(n - 1, k + radius)


def gaussian_weights(k: int, radius: int, sigma: float, n: int) -> np.ndarray:
    """Normalized Gaussian weights over the clamped window around ``k``."""
    lo, hi = window_bounds(k, radius, n)
    if lo > hi:
        raise ValueError(f"empty window for k={k}, r={radius}, n={n}")
    d = np.arange(lo, hi + 1, dtype=np.float64) - k
    w = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return w / w.sum()


def smooth_translations(traj: Trajectory, p: SmoothingParams) -> np.ndarray:
    t = traj.translations
    n = len(t)
    out = np.empty_like(t)
    for k in range(n):
        lo, hi = window_bounds(k, p.r, n)
        out[k] = gaussian_weights(k, p.r, p.sigma, n) @ t[lo : hi + 1]
    return out


def smooth_rotations(traj: Trajectory, p: SmoothingParams) -> np.ndarray:
    q = traj.quaternions
    n = len(q)
    out = np.empty_like(q)
    for k in range(n):
        lo, hi = window_bounds(k, p.r, n)
        win = q[lo : hi + 1]
        # flip every quaternion into the hemisphere of the window center
        signs = np.where(win @ q[k] < 0.0, -1.0, 1.0)
        acc = gaussian_weights(k, p.r, p.sigma, n) @ (win * signs[:, None])
        norm = float(np.linalg.norm(acc))
        if norm < DEGENERATE_NORM:
            raise DegenerateRotation(f"weighted quaternion sum has norm {norm:.3g}", frame=k)
        out[k] = acc / norm
    return out


def smooth_trajectory(traj: Trajectory, p: SmoothingParams) -> Trajectory:
    """Smoothed extrinsics; output has the same length and fps as the input."""
    return Trajectory.from_arrays(smooth_rotations(traj, p), smooth_translations(traj, p), traj.fps)


def trajectory_to_json(traj: Trajectory) -> list:
    return [{"q": [float(x) for x in pose.q], "t": [float(x) for x in pose.t]} for pose in traj.poses]


def trajectory_from_json(entries: list, fps: float = 30.0) -> Trajectory:
    from stab.bundle import pose_from_json

    return Trajectory(tuple(pose_from_json(e, i) for i, e in enumerate(entries)), fps)


def save_trajectories(path, raw: Trajectory, smoothed: Trajectory, params: SmoothingParams | None = None) -> None:
    doc = {"fps": raw.fps, "raw": trajectory_to_json(raw), "smoothed": trajectory_to_json(smoothed)}
    if params is not None:
        doc["sigma"] = params.sigma
        doc["radius"] = params.r
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_trajectories(path) -> tuple[Trajectory, Trajectory]:
    doc = json.loads(Path(path).read_text())
    fps = float(doc.get("fps", 30.0))
    return trajectory_from_json(doc["raw"], fps), trajectory_from_json(doc["smoothed"], fps)
