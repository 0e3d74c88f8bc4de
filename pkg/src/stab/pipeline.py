"""End-to-end stabilization of a bundle and evaluation of a stabilized sequence.

Output directory written by :func:`write_stabilized`::

    stabilized/frame_%06d.png   final full-frame output
    coverage/cov_%06d.png       255 where the first render pass landed a splat
    flow/flow_%06d.flo          forward flow of the output sequence
    meta.json, cameras.json     output cameras (smoothed poses, render intrinsics)
    trajectory.json             raw and smoothed trajectories
    fill_report.json            per-frame hole filling statistics
    config.json                 effective run configuration
    masks_combined/             combined dynamic masks (diagnostics only)
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from stab._parallel import thread_map
from stab.bundle import (
    Bundle,
    FlowField,
    camera_to_json,
    pose_from_json,
    read_flo,
    read_mask,
    read_rgb,
    write_flo,
    write_mask,
    write_png,
)
from stab.errors import ConfigError, LengthMismatch, TooShort
from stab.geometry import CameraIntrinsics, CameraModel, Direction, pixel_grid, project_points, transform_point
from stab.masking import MaskParams, hybrid_masks
from stab.metrics import (
    MetricReport,
    cropping_ratio,
    grid_matches,
    pair_sampson_error,
    per_pair_warping_error,
    read_matches_csv,
    stability_score,
    WE_SCALE,
)
from stab.render import PointMapCache, RenderParams, build_point_set, fill_holes, render
from stab.smoothing import SmoothingParams, Trajectory, save_trajectories, smooth_trajectory

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    sigma: float = 8.0
    radius: int | None = None
    tau: float = 2.0
    window_n: int = 3
    splat_radius: int = 1
    render_model: str | None = None
    seed: int = 0
    mask_dilate: bool = True
    emit_diagnostics: bool = False

    def __post_init__(self):
        try:
            self.smoothing_params()
            self.mask_params()
            self.render_params()
            if self.render_model is not None:
                self.render_model = CameraModel.parse(self.render_model).value
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(doc)

    def smoothing_params(self) -> SmoothingParams:
        return SmoothingParams(float(self.sigma), None if self.radius is None else int(self.radius))

    def mask_params(self) -> MaskParams:
        return MaskParams(float(self.tau), bool(self.mask_dilate))

    def render_params(self) -> RenderParams:
        return RenderParams(int(self.window_n), int(self.splat_radius))


@dataclass(eq=False)
class Stabilized:
    raw: Trajectory
    smoothed: Trajectory
    masks: list  # combined dynamic masks per input frame
    cameras: list  # render intrinsics per output frame
    frames: list  # final RGB frames
    renders: list  # RenderResult after the temporal fill pass
    first_coverage: list  # coverage of the first render pass
    reports: list  # FillReport per frame
    flows: list  # FlowField per output frame pair


def render_cameras(b: Bundle, model: str | None) -> list:
    if model is None:
        return b.intrinsics
    return [k.with_model(model) for k in b.intrinsics]


def output_flow(b: Bundle, res, t: int, smoothed: Trajectory, cams: list, pointmaps) -> FlowField:
    """Forward flow t -> t+1 of the output, following each pixel's winning splat.

    Static points stay put in the world. Dynamic points are carried to frame
    t+1 by the observed flow at their source pixel.
    """
    h, w = cams[t].height, cams[t].width
    covered = res.coverage
    world_next = res.world.copy()
    dyn = covered & res.dynamic
    if dyn.any():
        src = res.source_pixel[dyn]
        sv, su = np.divmod(src, b.width)
        f = b.flows[t]
        ok = f.valid[sv, su]
        tu = np.floor(su + f.u[sv, su].astype(np.float64) + 0.5)
        tv = np.floor(sv + f.v[sv, su].astype(np.float64) + 0.5)
        ok &= (tu >= 0) & (tu < b.width) & (tv >= 0) & (tv < b.height)
        moved = np.full((len(src), 3), np.nan)
        pm_next = pointmaps[t + 1]
        moved[ok] = pm_next[tv[ok].astype(np.int64), tu[ok].astype(np.int64)]
        world_next[dyn] = moved
    cam_next = transform_point(world_next, smoothed.poses[t + 1], Direction.WORLD_TO_CAM)
    uv, ok = project_points(cam_next, cams[t + 1])
    flow = uv - pixel_grid(h, w)
    valid = covered & ok & np.isfinite(world_next[..., 0])
    return FlowField.from_array(flow.astype(np.float32), valid)


def stabilize(b: Bundle, cfg: RunConfig) -> Stabilized:
    raw = Trajectory(tuple(b.poses), b.fps)
    smoothed = smooth_trajectory(raw, cfg.smoothing_params())
    masks = hybrid_masks(b, cfg.mask_params())
    cams = render_cameras(b, cfg.render_model)
    rp = cfg.render_params()
    pointmaps = PointMapCache(b)
    for t in range(b.n_frames):
        pointmaps[t]

    def render_frame(t):
        ps = build_point_set(b, masks, t, rp, pointmaps)
        return render(ps, smoothed.poses[t], cams[t], rp)

    renders = thread_map(render_frame, range(b.n_frames))
    first_coverage = [r.coverage.copy() for r in renders]
    filled = fill_holes(renders, b, smoothed, rp, masks=masks, cameras=cams, pointmaps=pointmaps)
    merged = [f.render for f in filled]
    flows = thread_map(lambda t: output_flow(b, merged[t], t, smoothed, cams, pointmaps), range(b.n_frames - 1))
    for f in filled:
        r = f.report
        log.debug("frame %d: covered %d, temporal %d, spatial %d", r.frame, r.render_covered, r.temporal_filled, r.spatial_filled)
    return Stabilized(
        raw=raw,
        smoothed=smoothed,
        masks=masks,
        cameras=cams,
        frames=[f.image for f in filled],
        renders=merged,
        first_coverage=first_coverage,
        reports=[f.report for f in filled],
        flows=flows,
    )


def write_stabilized(s: Stabilized, out, cfg: RunConfig) -> None:
    out = Path(out)
    for sub in ("stabilized", "coverage", "flow"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    if cfg.emit_diagnostics:
        (out / "masks_combined").mkdir(exist_ok=True)
    n = len(s.frames)

    def save(t):
        write_png(out / "stabilized" / f"frame_{t:06d}.png", s.frames[t])
        write_mask(out / "coverage" / f"cov_{t:06d}.png", s.first_coverage[t])
        if t < n - 1:
            write_flo(out / "flow" / f"flow_{t:06d}.flo", s.flows[t])
        if cfg.emit_diagnostics:
            write_mask(out / "masks_combined" / f"mask_{t:06d}.png", s.masks[t])

    thread_map(save, range(n))
    k0 = s.cameras[0]
    meta = {"n_frames": n, "width": k0.width, "height": k0.height, "fps": s.raw.fps, "camera_model": k0.model.value}
    _write_json(out / "meta.json", meta)
    _write_json(out / "cameras.json", [camera_to_json(k, p) for k, p in zip(s.cameras, s.smoothed.poses)])
    save_trajectories(out / "trajectory.json", s.raw, s.smoothed, cfg.smoothing_params())
    _write_json(out / "fill_report.json", [r.as_dict() for r in s.reports])
    _write_json(out / "config.json", asdict(cfg))


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# evaluation


@dataclass(eq=False)
class Sequence:
    """A frame sequence to evaluate, read from a stabilized output or a bundle directory."""

    frames: list
    flows: list | None
    cameras: list | None  # (CameraIntrinsics, Pose) per frame
    content: list  # per-frame bool masks of content pixels
    root: Path


def read_sequence(path, bundle: Bundle | None = None) -> Sequence:
    root = Path(path)
    frame_dir = root / "stabilized" if (root / "stabilized").is_dir() else root / "frames"
    frame_files = sorted(frame_dir.glob("frame_*.png"))
    frames = [read_rgb(p) for p in frame_files]
    if not frames:
        raise LengthMismatch(f"no frames found under {frame_dir}")

    flow_files = sorted((root / "flow").glob("flow_*.flo"))
    flows = [read_flo(p) for p in flow_files] if len(flow_files) == len(frames) - 1 else None

    cameras = None
    cams_path = root / "cameras.json"
    meta_path = root / "meta.json"
    if cams_path.is_file() and meta_path.is_file():
        meta = json.loads(meta_path.read_text())
        model = CameraModel.parse(meta["camera_model"])
        entries = json.loads(cams_path.read_text())
        if len(entries) == len(frames):
            cameras = [
                (
                    CameraIntrinsics(model, c["fx"], c["fy"], c["cx"], c["cy"], int(meta["width"]), int(meta["height"])),
                    pose_from_json(c, i),
                )
                for i, c in enumerate(entries)
            ]

    h, w = frames[0].shape[:2]
    content = [np.ones((h, w), bool) for _ in frames]
    report_path = root / "fill_report.json"
    if report_path.is_file():
        for entry in json.loads(report_path.read_text()):
            t = int(entry["frame"])
            remaining = int(entry.get("holes_remaining", 0))
            cov_path = root / "coverage" / f"cov_{t:06d}.png"
            if 0 <= t < len(content) and remaining and cov_path.is_file():
                # unfilled pixels are not stored; fall back to the first-pass coverage
                content[t] = read_mask(cov_path)
    return Sequence(frames, flows, cameras, content, root)


def evaluate(b: Bundle, seq: Sequence, seed: int = 0) -> MetricReport:
    if len(seq.frames) != b.n_frames:
        raise LengthMismatch(f"bundle has {b.n_frames} frames, output has {len(seq.frames)}")
    n = len(seq.frames)
    report = MetricReport()
    report.cropping = cropping_ratio(seq.content)

    if seq.cameras is not None:
        traj = Trajectory(tuple(p for _, p in seq.cameras), b.fps)
    else:
        traj = Trajectory(tuple(b.poses), b.fps)
    try:
        report.stability = stability_score(traj)
    except TooShort:
        report.stability = None

    per_frame = [{"frame": t, "cropping": float(seq.content[t].mean()), "ese_px2": None, "we_x1e3": None} for t in range(n)]
    if seq.flows is not None:
        we_pairs = per_pair_warping_error(seq.frames, seq.flows)
        kept = [x for x in we_pairs if x is not None]
        report.we = float(np.mean(kept)) / WE_SCALE if kept else None
        eses = []
        for t, flow in enumerate(seq.flows):
            csv_path = seq.root / f"matches_{t:06d}.csv"
            matches = read_matches_csv(csv_path) if csv_path.is_file() else grid_matches(flow)
            cam_a = seq.cameras[t] if seq.cameras else None
            cam_b = seq.cameras[t + 1] if seq.cameras else None
            e = pair_sampson_error(matches, cam_a, cam_b, seed=seed)
            per_frame[t]["ese_px2"] = e
            per_frame[t]["we_x1e3"] = None if we_pairs[t] is None else we_pairs[t] / WE_SCALE
            if e is not None:
                eses.append(e)
        report.ese = float(np.mean(eses)) if eses else None
    report.per_frame = per_frame
    return report
