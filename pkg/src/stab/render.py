"""Composite point sets, z-buffered point splatting and hole filling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import minimum_filter

from stab.bundle import Bundle, pointmap_of_frame
from stab.geometry import CameraIntrinsics, Direction, Pose, depth_of, project_points, transform_point

NO_SOURCE = -1


@dataclass(frozen=True)
class RenderParams:
    window_n: int = 3
    splat_radius: int = 1
    hole_color: tuple = (0, 0, 0)
    depth_tolerance: float = 0.05

    def __post_init__(self):
        if self.window_n < 0:
            raise ValueError(f"window_n must be >= 0, got {self.window_n!r}")
        if self.splat_radius < 0:
            raise ValueError(f"splat_radius must be >= 0, got {self.splat_radius!r}")
        if self.depth_tolerance < 0:
            raise ValueError(f"depth_tolerance must be >= 0, got {self.depth_tolerance!r}")
        if len(self.hole_color) != 3:
            raise ValueError("hole_color must be an RGB triple")


@dataclass(frozen=True, eq=False)
class Points:
    """Colored world points with their origin ``(source_frame, row-major pixel index)``."""

    positions: np.ndarray
    colors: np.ndarray
    source_frame: np.ndarray
    source_pixel: np.ndarray

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls) -> "Points":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.uint8), np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, parts) -> "Points":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.colors for p in parts]),
            np.concatenate([p.source_frame for p in parts]),
            np.concatenate([p.source_pixel for p in parts]),
        )


@dataclass(frozen=True, eq=False)
class CompositePointSet:
    static_points: Points
    dynamic_points: Points

    def __len__(self):
        return len(self.static_points) + len(self.dynamic_points)


@dataclass(eq=False)
class RenderResult:
    image: np.ndarray  # (H, W, 3) uint8
    coverage: np.ndarray  # (H, W) bool
    zbuffer: np.ndarray  # (H, W) float64, inf where uncovered
    # winning splat per pixel, used to derive the output flow
    world: np.ndarray = field(repr=False, default=None)  # (H, W, 3), NaN where uncovered
    source_frame: np.ndarray = field(repr=False, default=None)  # (H, W) int64, -1 where uncovered
    source_pixel: np.ndarray = field(repr=False, default=None)
    dynamic: np.ndarray = field(repr=False, default=None)  # (H, W) bool


def _frame_points(b: Bundle, t: int, select: np.ndarray, pointmap: np.ndarray) -> Points:
    idx = np.flatnonzero(select.ravel())
    pm = pointmap.reshape(-1, 3)
    return Points(
        positions=pm[idx],
        colors=b.frames[t].reshape(-1, 3)[idx],
        source_frame=np.full(len(idx), t, np.int64),
        source_pixel=idx.astype(np.int64),
    )


class PointMapCache:
    """Lazily computed world point maps of a bundle's frames."""

    def __init__(self, b: Bundle):
        self.bundle = b
        self._maps: dict = {}

    def __getitem__(self, t: int) -> np.ndarray:
        if t not in self._maps:
            self._maps[t] = pointmap_of_frame(self.bundle, t)
        return self._maps[t]


def static_points(b: Bundle, cm: list, frames, pointmaps=None) -> Points:
    pointmaps = pointmaps if pointmaps is not None else PointMapCache(b)
    parts = []
    for i in frames:
        pm = pointmaps[i]
        parts.append(_frame_points(b, i, ~np.asarray(cm[i], bool) & np.isfinite(pm[..., 0]), pm))
    return Points.concat(parts)


def build_point_set(b: Bundle, cm: list, t: int, p: RenderParams, pointmaps=None) -> CompositePointSet:
    """Static points of the window around ``t`` plus frame ``t``'s dynamic points."""
    if len(cm) != b.n_frames:
        raise ValueError(f"expected {b.n_frames} masks, got {len(cm)}")
    pointmaps = pointmaps if pointmaps is not None else PointMapCache(b)
    lo, hi = max(0, t - p.window_n), min(b.n_frames - 1, t + p.window_n)
    stat = static_points(b, cm, range(lo, hi + 1), pointmaps)
    pm = pointmaps[t]
    dyn = _frame_points(b, t, np.asarray(cm[t], bool) & np.isfinite(pm[..., 0]), pm)
    return CompositePointSet(stat, dyn)


def _splat(points: Points, dynamic: np.ndarray, pose: Pose, cam: CameraIntrinsics, p: RenderParams) -> RenderResult:
    h, w = cam.height, cam.width
    hw = h * w
    image = np.empty((h, w, 3), np.uint8)
    image[:] = np.asarray(p.hole_color, np.uint8)
    zbuf = np.full(hw, np.inf)
    world = np.full((hw, 3), np.nan)
    src_f = np.full(hw, NO_SOURCE, np.int64)
    src_p = np.full(hw, NO_SOURCE, np.int64)
    dyn = np.zeros(hw, bool)

    if len(points):
        cam_pts = transform_point(points.positions, pose, Direction.WORLD_TO_CAM)
        uv, ok = project_points(cam_pts, cam)
        depth = depth_of(cam_pts, cam.model)
        ok &= depth > 0
        r = p.splat_radius
        # drop points whose footprint cannot touch the image
        cu = np.floor(np.nan_to_num(uv[:, 0]) + 0.5)
        cv = np.floor(np.nan_to_num(uv[:, 1]) + 0.5)
        ok &= (cu >= -r) & (cu <= w - 1 + r) & (cv >= -r) & (cv <= h - 1 + r)
        idx = np.flatnonzero(ok)
        fu = (uv[idx, 0] - cu[idx]).astype(np.float32)
        fv = (uv[idx, 1] - cv[idx]).astype(np.float32)
        d = depth[idx]
        key = points.source_frame[idx] * hw + points.source_pixel[idx]

        # work on a grid padded by 2r so every footprint pixel has an index
        pad = 2 * r
        hp, wp = h + 2 * pad, w + 2 * pad
        base = ((cv[idx] + pad) * wp + cu[idx] + pad).astype(np.int32)
        centers = np.full(hp * wp, np.inf)
        np.minimum.at(centers, base, d)
        # front depth per pixel: min over the centers within r of it
        zmin = minimum_filter(centers.reshape(hp, wp), size=2 * r + 1, mode="constant", cval=np.inf).ravel()

        # candidates as (offset, point) grids
        offs = np.arange(-r, r + 1)
        dy, dx = (a.ravel()[:, None] for a in np.meshgrid(offs, offs, indexing="ij"))
        pix = base + (dy * wp + dx).astype(np.int32)

        # z-test: candidates within depth_tolerance of the front depth are one
        # surface; the splat centered nearest the pixel wins, then the smallest
        # (frame, pixel) key
        front = d <= zmin[pix] * (1.0 + p.depth_tolerance)
        ou = dx.astype(np.float32)
        ov = dy.astype(np.float32)
        dist = (fu - ou) ** 2 + (fv - ov) ** 2
        dist[~front] = np.inf
        nearest = np.full(hp * wp, np.inf, np.float32)
        np.minimum.at(nearest, pix.ravel(), dist.ravel())
        off_f, cand_f = np.nonzero(front & (dist == nearest[pix]))
        pix_f = pix[off_f, cand_f]
        key_f = key[cand_f]
        best = np.full(hp * wp, np.iinfo(np.int64).max)
        np.minimum.at(best, pix_f, key_f)
        win = key_f == best[pix_f]
        pix_f, pts_w = pix_f[win], idx[cand_f[win]]
        # back to unpadded indices, dropping the border
        pv, pu = np.divmod(pix_f, wp)
        pv -= pad
        pu -= pad
        inb = (pu >= 0) & (pu < w) & (pv >= 0) & (pv < h)
        pix_w, pts_w = pv[inb] * w + pu[inb], pts_w[inb]
        zbuf[pix_w] = depth[pts_w]

        image.reshape(-1, 3)[pix_w] = points.colors[pts_w]
        world[pix_w] = points.positions[pts_w]
        src_f[pix_w] = points.source_frame[pts_w]
        src_p[pix_w] = points.source_pixel[pts_w]
        dyn[pix_w] = dynamic[pts_w]

    coverage = src_f >= 0
    return RenderResult(
        image=image,
        coverage=coverage.reshape(h, w),
        zbuffer=zbuf.reshape(h, w),
        world=world.reshape(h, w, 3),
        source_frame=src_f.reshape(h, w),
        source_pixel=src_p.reshape(h, w),
        dynamic=dyn.reshape(h, w),
    )


def render(ps: CompositePointSet, pose: Pose, cam: CameraIntrinsics, p: RenderParams) -> RenderResult:
    """Splat the composite set into ``cam`` placed at ``pose`` (camera-to-world)."""
    points = Points.concat([ps.static_points, ps.dynamic_points])
    dynamic = np.zeros(len(points), bool)
    dynamic[len(ps.static_points) :] = True
    return _splat(points, dynamic, pose, cam, p)


# ---------------------------------------------------------------------------
# hole filling


def pull_push(image: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Fill unknown pixels by pull-push pyramid interpolation; known pixels are kept."""
    img = np.asarray(image, np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    w0 = np.asarray(known, np.float64)
    if w0.all() or not w0.any():
        out = img.copy()
        return out[..., 0] if squeeze else out

    colors = [img * w0[..., None]]
    weights = [w0]
    # pull: premultiplied colors and weights summed over 2x2 blocks, weights clipped to 1
    while max(weights[-1].shape) > 1:
        c, wt = colors[-1], weights[-1]
        h, w = wt.shape
        ph, pw = h % 2, w % 2
        c = np.pad(c, ((0, ph), (0, pw), (0, 0)))
        wt = np.pad(wt, ((0, ph), (0, pw)))
        cs = c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2]
        ws = wt[0::2, 0::2] + wt[1::2, 0::2] + wt[0::2, 1::2] + wt[1::2, 1::2]
        scale = np.where(ws > 1.0, 1.0 / np.maximum(ws, 1e-300), 1.0)
        colors.append(cs * scale[..., None])
        weights.append(ws * scale)

    # push: blend each level with its upsampled parent where coverage is partial
    filled = colors[-1] / np.maximum(weights[-1], 1e-300)[..., None]
    for c, wt in zip(reversed(colors[:-1]), reversed(weights[:-1])):
        h, w = wt.shape
        up = np.repeat(np.repeat(filled, 2, axis=0), 2, axis=1)[:h, :w]
        filled = c + (1.0 - wt)[..., None] * up
    out = np.where(np.asarray(known, bool)[..., None], img, filled)
    return out[..., 0] if squeeze else out


@dataclass
class FillReport:
    frame: int
    render_covered: int
    temporal_filled: int
    spatial_filled: int
    holes_remaining: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(eq=False)
class FilledFrame:
    image: np.ndarray
    render: RenderResult  # render merged with the temporal pass
    temporal: np.ndarray  # pixels filled by wider-window re-rendering
    spatial: np.ndarray  # pixels filled by pull-push
    report: FillReport


def _merge(base: RenderResult, extra: RenderResult, where: np.ndarray) -> None:
    base.image[where] = extra.image[where]
    base.coverage[where] = True
    base.zbuffer[where] = extra.zbuffer[where]
    base.world[where] = extra.world[where]
    base.source_frame[where] = extra.source_frame[where]
    base.source_pixel[where] = extra.source_pixel[where]
    base.dynamic[where] = extra.dynamic[where]


def fill_holes(
    seq: list,
    b: Bundle,
    smoothed,
    p: RenderParams,
    masks: list | None = None,
    cameras: list | None = None,
    pointmaps=None,
    widen=(2, 4),
) -> list:
    """Two-pass hole filling of rendered frames.

    Pass 1 re-renders the holes of frame ``t`` from static points of the
    frames just outside its window (``n + 2`` then ``n + 4``). Pass 2 fills
    whatever is left by pull-push interpolation. Returns one
    :class:`FilledFrame` per input frame; ``[f.image for f in out]`` has no
    hole pixels.
    """
    masks = masks if masks is not None else list(b.semantic_masks)
    cameras = cameras if cameras is not None else b.intrinsics
    pointmaps = pointmaps if pointmaps is not None else PointMapCache(b)
    poses = smoothed.poses if hasattr(smoothed, "poses") else list(smoothed)
    if len(seq) != len(poses):
        raise ValueError(f"{len(seq)} renders but {len(poses)} poses")

    out = []
    for t, res in enumerate(seq):
        merged = RenderResult(
            res.image.copy(),
            res.coverage.copy(),
            res.zbuffer.copy(),
            res.world.copy(),
            res.source_frame.copy(),
            res.source_pixel.copy(),
            res.dynamic.copy(),
        )
        covered0 = int(merged.coverage.sum())
        temporal = np.zeros_like(merged.coverage)
        used = max(0, t - p.window_n), min(b.n_frames - 1, t + p.window_n)
        for extra in widen:
            if merged.coverage.all():
                break
            n = p.window_n + extra
            lo, hi = max(0, t - n), min(b.n_frames - 1, t + n)
            frames = [i for i in range(lo, hi + 1) if not used[0] <= i <= used[1]]
            used = (lo, hi)
            if not frames:
                continue
            pts = static_points(b, masks, frames, pointmaps)
            extra_res = _splat(pts, np.zeros(len(pts), bool), poses[t], cameras[t], p)
            newly = extra_res.coverage & ~merged.coverage
            _merge(merged, extra_res, newly)
            temporal |= newly

        holes = ~merged.coverage
        image = merged.image.copy()
        if holes.any():
            if merged.coverage.any():
                filled = pull_push(image.astype(np.float64), merged.coverage)
                image[holes] = np.clip(np.rint(filled[holes]), 0, 255).astype(np.uint8)
            else:
                image[holes] = b.frames[t][holes]
        report = FillReport(
            frame=t,
            render_covered=covered0,
            temporal_filled=int(temporal.sum()),
            spatial_filled=int(holes.sum()),
            holes_remaining=0,
        )
        out.append(FilledFrame(image, merged, temporal, holes, report))
    return out
