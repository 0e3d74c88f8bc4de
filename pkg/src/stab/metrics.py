"""Evaluation metrics: cropping ratio, stability score, epipolar Sampson error, warping error."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from stab.errors import (
    DegenerateBaseline,
    DegenerateConfiguration,
    EmptyAfterFiltering,
    InsufficientMatches,
    LengthMismatch,
    TooShort,
)
from stab.geometry import CameraModel, quat_angle, relative_pose

# 2nd..6th DFT coefficients when DC is counted as the 1st
STABILITY_BAND = (1, 5)
MIN_STABILITY_FRAMES = 16
ZERO_ENERGY = 1e-12
SAMPSON_MIN_DENOM = 1e-12
WE_SCALE = 1e-3


@dataclass
class MetricReport:
    cropping: float | None = None
    stability: float | None = None
    ese: float | None = None
    we: float | None = None
    per_frame: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "cropping": self.cropping,
            "stability": self.stability,
            "ese_px2": self.ese,
            "we_x1e3": self.we,
            "lpips": None,
            "per_frame": self.per_frame,
        }


# ---------------------------------------------------------------------------
# cropping


def cropping_ratio(coverage) -> float:
    """Mean over frames of the fraction of content pixels."""
    coverage = list(coverage)
    if not coverage:
        raise ValueError("cropping_ratio needs at least one frame")
    return float(np.mean([np.asarray(c, bool).mean() for c in coverage]))


# ---------------------------------------------------------------------------
# stability


def motion_profiles(traj) -> tuple[np.ndarray, np.ndarray]:
    """Per-step translation magnitudes and rotation angles of a trajectory."""
    t = traj.translations
    q = traj.quaternions
    return np.linalg.norm(np.diff(t, axis=0), axis=1), quat_angle(q[:-1], q[1:])


def band_energy_ratio(profile: np.ndarray, band=STABILITY_BAND) -> float:
    """Energy in 0-indexed DFT bins ``band`` over energy in bins ``1..L/2`` (DC excluded)."""
    spec = np.abs(np.fft.rfft(np.asarray(profile, np.float64))) ** 2
    half = len(profile) // 2
    total = spec[1 : half + 1].sum()
    if total < ZERO_ENERGY:
        return 1.0
    lo, hi = band
    return float(spec[lo : min(hi, half) + 1].sum() / total)


def stability_score(traj) -> float:
    """Mean low-frequency energy ratio of the translation and rotation profiles."""
    if len(traj) < MIN_STABILITY_FRAMES:
        raise TooShort(f"stability needs at least {MIN_STABILITY_FRAMES} poses, got {len(traj)}")
    trans, rot = motion_profiles(traj)
    return 0.5 * (band_energy_ratio(trans) + band_energy_ratio(rot))


# ---------------------------------------------------------------------------
# epipolar geometry


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def fundamental_from_poses(a: tuple, b: tuple) -> np.ndarray:
    """F with ``x_b^T F x_a = 0`` for two perspective cameras ``(intrinsics, pose)``."""
    (ka, pa), (kb, pb) = a, b
    if ka.model is not CameraModel.PERSPECTIVE or kb.model is not CameraModel.PERSPECTIVE:
        raise ValueError("fundamental matrices are only defined for perspective cameras")
    # camera a expressed in camera b's frame maps x_a-rays into b
    rel = relative_pose(pb, pa)
    if np.linalg.norm(rel.t) <= 1e-9:
        raise DegenerateBaseline("cameras share a center; F is undefined")
    e = skew(rel.t) @ rel.rotation
    f = np.linalg.inv(kb.matrix()).T @ e @ np.linalg.inv(ka.matrix())
    return f / np.linalg.norm(f)


def _homogeneous(x) -> np.ndarray:
    x = np.asarray(x, np.float64)
    return np.concatenate([x, np.ones((len(x), 1))], axis=1)


def sampson_distances(x1, x2, f: np.ndarray) -> np.ndarray:
    """Per-pair Sampson distance (pixel^2); NaN where the denominator vanishes."""
    h1, h2 = _homogeneous(x1), _homogeneous(x2)
    fx1 = h1 @ f.T
    ftx2 = h2 @ f
    num = np.einsum("ij,ij->i", h2, fx1) ** 2
    den = fx1[:, 0] ** 2 + fx1[:, 1] ** 2 + ftx2[:, 0] ** 2 + ftx2[:, 1] ** 2
    out = np.full(len(h1), np.nan)
    keep = den > SAMPSON_MIN_DENOM
    out[keep] = num[keep] / den[keep]
    return out


def sampson_error(matches, f: np.ndarray) -> float:
    """Mean Sampson distance over pairs with a usable denominator.

    ``matches`` is an ``(M, 4)`` array of ``u1, v1, u2, v2``.
    """
    m = np.asarray(matches, np.float64).reshape(-1, 4)
    d = sampson_distances(m[:, :2], m[:, 2:], np.asarray(f, np.float64))
    kept = d[np.isfinite(d)]
    if kept.size == 0:
        raise EmptyAfterFiltering(f"all {len(m)} pairs have a degenerate Sampson denominator")
    return float(kept.mean())


def _normalizing_transform(x: np.ndarray) -> np.ndarray:
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def eight_point(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Normalized eight-point estimate with rank-2 enforcement, unit Frobenius norm."""
    t1, t2 = _normalizing_transform(x1), _normalizing_transform(x2)
    n1 = _homogeneous(x1) @ t1.T
    n2 = _homogeneous(x2) @ t2.T
    a = np.einsum("ni,nj->nij", n2, n1).reshape(len(n1), 9)
    _, s, vt = np.linalg.svd(a)
    if len(s) >= 8 and s[7] < 1e-10 * s[0]:
        raise DegenerateConfiguration("eight-point system has a multi-dimensional null space")
    f = vt[-1].reshape(3, 3)
    u, sv, vt2 = np.linalg.svd(f)
    f = u @ np.diag([sv[0], sv[1], 0.0]) @ vt2
    f = t2.T @ f @ t1
    return f / np.linalg.norm(f)


@dataclass
class FundamentalFit:
    F: np.ndarray
    inliers: np.ndarray


def ransac_fundamental(matches, threshold: float = 1.0, iterations: int = 2000, seed: int = 0) -> FundamentalFit:
    """RANSAC over the normalized eight-point solver, refit on the best inlier set.

    A pair is an inlier when its Sampson distance is below ``threshold`` px^2.
    Deterministic for a given ``seed``.
    """
    m = np.asarray(matches, np.float64).reshape(-1, 4)
    if len(m) < 8:
        raise InsufficientMatches(f"need at least 8 matches, got {len(m)}")
    x1, x2 = m[:, :2], m[:, 2:]

    def support(f):
        return np.nan_to_num(sampson_distances(x1, x2, f), nan=np.inf) < threshold

    rng = np.random.default_rng(seed)
    best_f, best = None, None
    for _ in range(iterations):
        sample = rng.choice(len(m), 8, replace=False)
        try:
            f = eight_point(x1[sample], x2[sample])
        except DegenerateConfiguration:
            continue
        inl = support(f)
        if best is None or inl.sum() > best.sum():
            best_f, best = f, inl
            if best.all():
                break
    if best_f is None:
        raise DegenerateConfiguration("every eight-point sample was degenerate")
    if best.sum() > 8:
        try:
            f = eight_point(x1[best], x2[best])
        except DegenerateConfiguration:
            f = None
        # keep the refit only if it does not lose support
        if f is not None and support(f).sum() >= best.sum():
            best_f, best = f, support(f)
    return FundamentalFit(best_f, best)


def fundamental_from_matches(matches, threshold: float = 1.0, iterations: int = 2000, seed: int = 0) -> np.ndarray:
    """Rank-2, unit-norm F estimated robustly from ``(u1, v1, u2, v2)`` matches."""
    return ransac_fundamental(matches, threshold, iterations, seed).F


# ---------------------------------------------------------------------------
# warping error


def warp_residuals(frame_t: np.ndarray, frame_next: np.ndarray, flow) -> tuple[np.ndarray, np.ndarray]:
    """Squared color error of ``frame_next`` sampled along ``flow`` against ``frame_t``.

    Returns ``(sq_err, used)``; colors are scaled to [0, 1] and sampled bilinearly.
    """
    a = np.asarray(frame_t, np.float64) / 255.0
    b = np.asarray(frame_next, np.float64) / 255.0
    h, w = a.shape[:2]
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    tu = u + flow.u
    tv = v + flow.v
    with np.errstate(invalid="ignore"):
        used = flow.valid & (tu >= 0) & (tu <= w - 1) & (tv >= 0) & (tv <= h - 1)
    coords = np.stack([np.where(used, tv, 0.0), np.where(used, tu, 0.0)])
    warped = np.stack(
        [ndimage.map_coordinates(b[..., c], coords, order=1, mode="nearest") for c in range(a.shape[2])],
        axis=-1,
    )
    sq = ((warped - a) ** 2).mean(axis=-1)
    return np.where(used, sq, 0.0), used


def warping_error(frames, flows) -> float:
    """Mean over frame pairs of the flow-warped MSE, reported in units of 1e-3."""
    frames = list(frames)
    flows = list(flows)
    if len(flows) != len(frames) - 1:
        raise LengthMismatch(f"{len(frames)} frames need {len(frames) - 1} flows, got {len(flows)}")
    per_pair = per_pair_warping_error(frames, flows)
    finite = [x for x in per_pair if x is not None]
    if not finite:
        return 0.0
    return float(np.mean(finite)) / WE_SCALE


def per_pair_warping_error(frames, flows) -> list:
    out = []
    for t, flow in enumerate(flows):
        sq, used = warp_residuals(frames[t], frames[t + 1], flow)
        out.append(float(sq[used].mean()) if used.any() else None)
    return out


# ---------------------------------------------------------------------------
# correspondences


def grid_matches(flow, grid: int = 32) -> np.ndarray:
    """Matches ``(u1, v1, u2, v2)`` sampled from a flow field on a ``grid x grid`` lattice."""
    h, w = flow.shape
    us = np.unique(np.round(np.linspace(0, w - 1, grid)).astype(int))
    vs = np.unique(np.round(np.linspace(0, h - 1, grid)).astype(int))
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    uu, vv = uu.ravel(), vv.ravel()
    keep = flow.valid[vv, uu]
    uu, vv = uu[keep], vv[keep]
    du = flow.u[vv, uu].astype(np.float64)
    dv = flow.v[vv, uu].astype(np.float64)
    return np.stack([uu, vv, uu + du, vv + dv], axis=1).astype(np.float64)


def read_matches_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append([float(x) for x in row[:4]])
            except ValueError:
                # header line
                continue
    return np.asarray(rows, np.float64).reshape(-1, 4)


def write_matches_csv(path, matches) -> None:
    with open(Path(path), "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["u1", "v1", "u2", "v2"])
        for row in np.asarray(matches).reshape(-1, 4):
            wr.writerow([repr(float(x)) for x in row])


def pair_sampson_error(matches, cam_a: tuple | None, cam_b: tuple | None, seed: int = 0) -> float | None:
    """ESE of one frame pair; F from poses when possible, else estimated from the matches."""
    matches = np.asarray(matches, np.float64).reshape(-1, 4)
    if len(matches) == 0:
        return None
    f = None
    if cam_a is not None and cam_b is not None:
        try:
            f = fundamental_from_poses(cam_a, cam_b)
        except (DegenerateBaseline, ValueError):
            f = None
    if f is None:
        try:
            f = fundamental_from_matches(matches, seed=seed)
        except (InsufficientMatches, DegenerateConfiguration):
            return None
    try:
        return sampson_error(matches, f)
    except EmptyAfterFiltering:
        return None
