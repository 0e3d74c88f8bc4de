"""Deterministic synthetic bundles with analytic ground truth.

Scenes are made of textured axis-aligned rectangles, some of which move
with a constant world velocity (world units per frame). Images, depth,
flow and dynamic masks are computed by exact ray-rectangle intersection,
so every quantity the pipeline estimates has a closed-form reference.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from stab.bundle import Bundle, FlowField
from stab.errors import SpecError
from stab.geometry import (
    CameraIntrinsics,
    CameraModel,
    Direction,
    Pose,
    pixel_grid,
    project_points,
    quat_from_rotvec,
    quat_multiply,
    quat_normalize,
    transform_point,
    unproject_pixels,
)
from stab.smoothing import Trajectory

AXES = {"x": 0, "y": 1, "z": 2}


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise SpecError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = set(d) - set(allowed)
    if unknown:
        raise SpecError(f"{where}: unknown keys {sorted(unknown)}")


def _vec(value, n, where):
    try:
        arr = [float(x) for x in value]
    except (TypeError, ValueError):
        raise SpecError(f"{where}: expected {n} numbers") from None
    if len(arr) != n or not all(np.isfinite(arr)):
        raise SpecError(f"{where}: expected {n} finite numbers")
    return arr


@dataclass
class Texture:
    """Soft checkerboard between two colors plus seeded low-frequency color waves."""

    period: float = 1.0
    colors: list = field(default_factory=lambda: [[200, 80, 60], [60, 120, 200]])
    sharpness: float = 3.0
    noise: float = 20.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d, where="texture"):
        _check_keys(d, cls.__dataclass_fields__, where)
        tex = cls(**d)
        if not tex.period > 0:
            raise SpecError(f"{where}: period must be positive")
        if len(tex.colors) != 2:
            raise SpecError(f"{where}: colors must hold two RGB triples")
        tex.colors = [_vec(c, 3, f"{where}.colors") for c in tex.colors]
        if tex.sharpness < 0 or tex.noise < 0:
            raise SpecError(f"{where}: sharpness and noise must be >= 0")
        return tex

    def shade(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        c0 = np.asarray(self.colors[0], np.float64)
        c1 = np.asarray(self.colors[1], np.float64)
        k = 2 * np.pi / self.period
        s = 0.5 + 0.5 * np.tanh(self.sharpness * np.sin(k * a) * np.sin(k * b))
        rgb = c0 + s[..., None] * (c1 - c0)
        if self.noise > 0:
            rng = np.random.default_rng(self.seed)
            freq = rng.uniform(0.2, 1.0, size=(3, 2)) / self.period
            phase = rng.uniform(0, 2 * np.pi, size=3)
            for c in range(3):
                rgb[..., c] += self.noise * np.sin(2 * np.pi * (freq[c, 0] * a + freq[c, 1] * b) + phase[c])
        return rgb


@dataclass
class Rect:
    """Rectangle in the plane ``coord[axis] = offset`` spanning ``extent`` on the other two axes."""

    axis: str = "z"
    offset: float = 10.0
    extent: list = field(default_factory=lambda: [[-10.0, 10.0], [-10.0, 10.0]])
    texture: Texture = field(default_factory=Texture)

    @classmethod
    def from_dict(cls, d, where="rect"):
        _check_keys(d, cls.__dataclass_fields__, where)
        d = dict(d)
        if "texture" in d:
            d["texture"] = Texture.from_dict(d["texture"], f"{where}.texture")
        r = cls(**d)
        if r.axis not in AXES:
            raise SpecError(f"{where}: axis must be one of x, y, z")
        r.offset = float(r.offset)
        if len(r.extent) != 2:
            raise SpecError(f"{where}: extent must be two [lo, hi] ranges")
        r.extent = [_vec(e, 2, f"{where}.extent") for e in r.extent]
        if any(lo >= hi for lo, hi in r.extent):
            raise SpecError(f"{where}: extent ranges must have lo < hi")
        return r

    @property
    def in_plane_axes(self) -> tuple[int, int]:
        i = AXES[self.axis]
        return tuple(j for j in range(3) if j != i)


@dataclass
class Mover:
    rect: Rect
    velocity: list

    @classmethod
    def from_dict(cls, d, where="mover"):
        _check_keys(d, ("rect", "velocity"), where)
        if "rect" not in d or "velocity" not in d:
            raise SpecError(f"{where}: needs rect and velocity")
        return cls(Rect.from_dict(d["rect"], f"{where}.rect"), _vec(d["velocity"], 3, f"{where}.velocity"))


@dataclass
class BasePath:
    """Smooth camera path: constant linear velocity and constant angular rate per frame."""

    start: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    velocity: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    rotation: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    angular_rate: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    @classmethod
    def from_dict(cls, d, where="base_path"):
        _check_keys(d, cls.__dataclass_fields__, where)
        p = cls(**d)
        p.start = _vec(p.start, 3, f"{where}.start")
        p.velocity = _vec(p.velocity, 3, f"{where}.velocity")
        p.rotation = _vec(p.rotation, 3, f"{where}.rotation")
        p.angular_rate = _vec(p.angular_rate, 3, f"{where}.angular_rate")
        return p


@dataclass
class Jitter:
    """Per-axis RMS amplitudes; energy is spread over DFT bins ``band`` of the sequence."""

    translation: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    rotation: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    band: list = field(default_factory=lambda: [8, 16])

    @classmethod
    def from_dict(cls, d, where="jitter"):
        _check_keys(d, cls.__dataclass_fields__, where)
        j = cls(**d)
        j.translation = _vec(j.translation, 3, f"{where}.translation")
        j.rotation = _vec(j.rotation, 3, f"{where}.rotation")
        if any(a < 0 for a in j.translation + j.rotation):
            raise SpecError(f"{where}: amplitudes must be >= 0")
        if len(j.band) != 2 or not 1 <= int(j.band[0]) <= int(j.band[1]):
            raise SpecError(f"{where}: band must be [lo, hi] with 1 <= lo <= hi")
        j.band = [int(j.band[0]), int(j.band[1])]
        return j

    @property
    def is_zero(self) -> bool:
        return not any(self.translation) and not any(self.rotation)


@dataclass
class CameraSpec:
    model: str = "perspective"
    fx: float = 220.0
    fy: float = 220.0
    cx: float | None = None
    cy: float | None = None

    @classmethod
    def from_dict(cls, d, where="camera"):
        _check_keys(d, cls.__dataclass_fields__, where)
        c = cls(**d)
        try:
            CameraModel.parse(c.model)
        except ValueError as exc:
            raise SpecError(f"{where}: {exc}") from None
        return c


@dataclass
class SceneSpec:
    seed: int = 0
    n_frames: int = 64
    width: int = 256
    height: int = 256
    fps: float = 30.0
    camera: CameraSpec = field(default_factory=CameraSpec)
    layout: list = field(default_factory=list)
    movers: list = field(default_factory=list)
    base_path: BasePath = field(default_factory=BasePath)
    jitter: Jitter = field(default_factory=Jitter)
    sky_color: list = field(default_factory=lambda: [135.0, 170.0, 220.0])

    def __post_init__(self):
        self.validate()

    def validate(self):
        if int(self.n_frames) != self.n_frames or self.n_frames < 2:
            raise SpecError("n_frames must be an integer >= 2")
        if self.width < 1 or self.height < 1:
            raise SpecError("width and height must be >= 1")
        if not self.fps > 0:
            raise SpecError("fps must be positive")
        if not self.layout:
            raise SpecError("layout needs at least one static rectangle")
        try:
            self.intrinsics()
        except ValueError as exc:
            raise SpecError(f"camera: {exc}") from None

    @classmethod
    def from_dict(cls, d) -> "SceneSpec":
        _check_keys(d, cls.__dataclass_fields__, "scene")
        d = dict(d)
        try:
            if "camera" in d:
                d["camera"] = CameraSpec.from_dict(d["camera"])
            if "layout" in d:
                d["layout"] = [Rect.from_dict(r, f"layout[{i}]") for i, r in enumerate(d["layout"])]
            if "movers" in d:
                d["movers"] = [Mover.from_dict(m, f"movers[{i}]") for i, m in enumerate(d["movers"])]
            if "base_path" in d:
                d["base_path"] = BasePath.from_dict(d["base_path"])
            if "jitter" in d:
                d["jitter"] = Jitter.from_dict(d["jitter"])
            if "sky_color" in d:
                d["sky_color"] = _vec(d["sky_color"], 3, "sky_color")
            for key in ("seed", "n_frames", "width", "height"):
                if key in d:
                    if isinstance(d[key], bool) or int(d[key]) != d[key]:
                        raise SpecError(f"{key} must be an integer")
                    d[key] = int(d[key])
            return cls(**d)
        except TypeError as exc:
            raise SpecError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}: {exc}") from None
        return cls.from_dict(doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def intrinsics(self) -> CameraIntrinsics:
        c = self.camera
        cx = (self.width - 1) / 2.0 if c.cx is None else float(c.cx)
        cy = (self.height - 1) / 2.0 if c.cy is None else float(c.cy)
        return CameraIntrinsics(CameraModel.parse(c.model), float(c.fx), float(c.fy), cx, cy, self.width, self.height)


@dataclass(eq=False)
class GroundTruth:
    clean: Trajectory  # jitter-free path
    trajectory: Trajectory  # path the bundle was rendered along
    dynamic: np.ndarray  # (N, H, W) exact mover footprints
    spec: SceneSpec


# ---------------------------------------------------------------------------
# trajectories


def base_trajectory(spec: SceneSpec) -> Trajectory:
    bp = spec.base_path
    q0 = quat_from_rotvec(bp.rotation)
    poses = []
    for k in range(spec.n_frames):
        q = quat_normalize(quat_multiply(quat_from_rotvec(np.asarray(bp.angular_rate) * k), q0))
        t = np.asarray(bp.start) + k * np.asarray(bp.velocity)
        poses.append(Pose(q, t))
    return Trajectory(tuple(poses), spec.fps)


def band_limited_noise(n: int, band, rng: np.random.Generator, channels: int) -> np.ndarray:
    """``(channels, n)`` unit-RMS signals with random phases on DFT bins ``band`` below n/2."""
    lo, hi = band
    bins = np.arange(lo, min(hi, (n - 1) // 2) + 1)
    phases = rng.uniform(0.0, 2 * np.pi, size=(channels, max(len(bins), 1)))
    if len(bins) == 0:
        return np.zeros((channels, n))
    k = np.arange(n)
    waves = np.cos(2 * np.pi * bins[None, :, None] * k[None, None, :] / n + phases[:, :, None])
    # sum of m unit cosines on distinct bins has mean square m / 2
    return waves.sum(axis=1) * np.sqrt(2.0 / len(bins))


def jitter_trajectory(base: Trajectory, spec: SceneSpec) -> Trajectory:
    """Add seeded band-limited translation (world) and rotation (camera-local) jitter."""
    j = spec.jitter
    if j.is_zero:
        return base
    n = len(base)
    rng = np.random.default_rng([spec.seed, 0x5EED])
    noise = band_limited_noise(n, j.band, rng, 6)
    dt = noise[:3].T * np.asarray(j.translation)
    dr = noise[3:].T * np.asarray(j.rotation)
    poses = []
    for k, pose in enumerate(base.poses):
        q = quat_normalize(quat_multiply(pose.q, quat_from_rotvec(dr[k])))
        poses.append(Pose(q, pose.t + dt[k]))
    return Trajectory(tuple(poses), base.fps)


# ---------------------------------------------------------------------------
# ray casting


@dataclass(eq=False)
class View:
    rgb: np.ndarray  # (H, W, 3) float64 before quantization
    depth: np.ndarray  # (H, W), inf where no surface is hit
    hit: np.ndarray  # (H, W) int, -1 sky, else index into layout + movers
    world: np.ndarray  # (H, W, 3) hit points, NaN for sky


def _surfaces(spec: SceneSpec, frame: int):
    for r in spec.layout:
        yield r, np.zeros(3)
    for m in spec.movers:
        yield m.rect, np.asarray(m.velocity) * frame


def cast_view(spec: SceneSpec, pose: Pose, cam: CameraIntrinsics, frame: float = 0) -> View:
    """Ray-cast the scene state at ``frame`` into ``cam`` placed at ``pose``."""
    h, w = cam.height, cam.width
    rays_cam = unproject_pixels(pixel_grid(h, w), np.ones((h, w)), cam)
    rays = transform_point(rays_cam, Pose(pose.q, np.zeros(3)), Direction.CAM_TO_WORLD)
    origin = pose.t
    best = np.full((h, w), np.inf)
    hit = np.full((h, w), -1, np.int64)
    local = np.zeros((h, w, 2))
    for idx, (rect, shift) in enumerate(_surfaces(spec, frame)):
        i = AXES[rect.axis]
        a_ax, b_ax = rect.in_plane_axes
        d = rays[..., i]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (rect.offset + shift[i] - origin[i]) / d
        pa = origin[a_ax] + s * rays[..., a_ax] - shift[a_ax]
        pb = origin[b_ax] + s * rays[..., b_ax] - shift[b_ax]
        (a0, a1), (b0, b1) = rect.extent
        with np.errstate(invalid="ignore"):
            inside = (s > 1e-9) & np.isfinite(s) & (pa >= a0) & (pa <= a1) & (pb >= b0) & (pb <= b1)
            closer = inside & (s < best)
        best = np.where(closer, s, best)
        hit = np.where(closer, idx, hit)
        local[closer] = np.stack([pa[closer], pb[closer]], axis=-1)

    surfaces = list(_surfaces(spec, frame))
    rgb = np.empty((h, w, 3))
    rgb[:] = np.asarray(spec.sky_color, np.float64)
    for idx, (rect, _) in enumerate(surfaces):
        sel = hit == idx
        if sel.any():
            rgb[sel] = rect.texture.shade(local[sel][:, 0], local[sel][:, 1])
    world = origin + best[..., None] * rays
    world[hit < 0] = np.nan
    # rays_cam has unit z (perspective) or unit length (other models), so the
    # ray parameter already follows the depth convention of the camera model
    return View(rgb=rgb, depth=best, hit=hit, world=world)


def quantize(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def render_view(spec: SceneSpec, pose: Pose, cam: CameraIntrinsics | None = None, frame: float = 0) -> np.ndarray:
    """Ground-truth 8-bit image of the scene at ``frame`` seen from ``pose``."""
    return quantize(cast_view(spec, pose, cam or spec.intrinsics(), frame).rgb)


def _analytic_flow(spec: SceneSpec, view: View, frame: int, next_pose: Pose, cam: CameraIntrinsics) -> FlowField:
    n_static = len(spec.layout)
    moved = view.world.copy()
    for j, m in enumerate(spec.movers):
        sel = view.hit == n_static + j
        moved[sel] += np.asarray(m.velocity)
    uv, ok = project_points(transform_point(moved, next_pose, Direction.WORLD_TO_CAM), cam)
    flow = uv - pixel_grid(cam.height, cam.width)
    return FlowField.from_array(flow.astype(np.float32), ok & (view.hit >= 0))


def generate_scene(spec: SceneSpec) -> tuple[Bundle, GroundTruth]:
    spec.validate()
    clean = base_trajectory(spec)
    traj = jitter_trajectory(clean, spec)
    cam = spec.intrinsics()
    n_static = len(spec.layout)
    frames, depths, masks, flows = [], [], [], []
    for k, pose in enumerate(traj.poses):
        view = cast_view(spec, pose, cam, k)
        frames.append(quantize(view.rgb))
        depths.append(view.depth.astype(np.float32))
        masks.append(view.hit >= n_static)
        if k < spec.n_frames - 1:
            flows.append(_analytic_flow(spec, view, k, traj.poses[k + 1], cam))
    depth = np.stack(depths)
    depth[~np.isfinite(depth)] = np.nan
    masks = np.stack(masks)
    bundle = Bundle(
        frames=np.stack(frames),
        depths=depth,
        semantic_masks=masks,
        flows=flows,
        cameras=[(cam, p) for p in traj.poses],
        fps=spec.fps,
    )
    return bundle, GroundTruth(clean=clean, trajectory=traj, dynamic=masks.copy(), spec=spec)


# ---------------------------------------------------------------------------
# stock scenes


def default_spec(seed: int = 0, n_frames: int = 64, width: int = 256, height: int = 256) -> SceneSpec:
    """Jittered lateral dolly past layered panels in front of a backdrop."""
    tex = lambda p, c0, c1, s: Texture(period=p, colors=[c0, c1], sharpness=2.0, noise=18.0, seed=s)  # noqa: E731
    layout = [
        Rect("z", 14.0, [[-40.0, 40.0], [-40.0, 40.0]], tex(2.5, [210, 190, 150], [90, 110, 160], 1)),
        Rect("y", 2.0, [[-40.0, 40.0], [0.5, 14.0]], tex(1.5, [120, 160, 90], [70, 90, 60], 2)),
        Rect("z", 8.0, [[-3.5, -0.5], [-2.5, 2.0]], tex(0.8, [220, 90, 70], [240, 220, 120], 3)),
        Rect("z", 6.0, [[1.0, 3.0], [-1.5, 2.0]], tex(0.6, [60, 170, 190], [230, 230, 230], 4)),
        Rect("x", -4.5, [[-2.0, 2.0], [5.0, 9.0]], tex(0.9, [180, 120, 200], [90, 60, 120], 5)),
    ]
    return SceneSpec(
        seed=seed,
        n_frames=n_frames,
        width=width,
        height=height,
        fps=30.0,
        camera=CameraSpec("perspective", 220.0, 220.0),
        layout=layout,
        movers=[],
        base_path=BasePath(start=[-0.8, 0.0, 0.0], velocity=[0.025, 0.0, 0.0], angular_rate=[0.0, 0.002, 0.0]),
        jitter=Jitter(translation=[0.03, 0.02, 0.01], rotation=[0.006, 0.006, 0.003], band=[8, 16]),
    )


def mover_spec(seed: int = 0, n_frames: int = 24, width: int = 160, height: int = 120) -> SceneSpec:
    """Default-like scene with one panel translating sideways in front of the backdrop."""
    spec = default_spec(seed, n_frames, width, height)
    spec.camera = CameraSpec("perspective", 140.0, 140.0)
    spec.movers = [
        Mover(
            Rect("z", 5.0, [[-1.6, -0.2], [-0.9, 0.6]], Texture(0.5, [[250, 250, 60], [40, 40, 40]], 2.0, 10.0, 9)),
            [0.15, 0.0, 0.0],
        )
    ]
    spec.validate()
    return spec


def room_spec(seed: int = 0, n_frames: int = 8, width: int = 128, height: int = 64, model: str = "equirectangular") -> SceneSpec:
    """Closed box room so that every viewing direction hits a surface."""
    def wall(axis, off, ext, s):
        return Rect(axis, off, ext, Texture(1.0, [[200, 60 + 20 * s, 60], [50, 90, 180 - 15 * s]], 2.0, 15.0, s))

    e = [[-6.0, 6.0], [-6.0, 6.0]]
    layout = [
        wall("z", 6.0, e, 1),
        wall("z", -6.0, e, 2),
        wall("x", 6.0, e, 3),
        wall("x", -6.0, e, 4),
        wall("y", 3.0, e, 5),
        wall("y", -3.0, e, 6),
    ]
    return SceneSpec(
        seed=seed,
        n_frames=n_frames,
        width=width,
        height=height,
        camera=CameraSpec(model, 40.0, 40.0),
        layout=layout,
        base_path=BasePath(velocity=[0.05, 0.0, 0.02]),
        jitter=Jitter(translation=[0.02, 0.02, 0.02], rotation=[0.01, 0.01, 0.01], band=[1, 3]),
    )
