"""Reconstruction bundles: per-frame RGB, depth, dynamic masks, forward flow and cameras.

On-disk layout of a bundle directory::

    meta.json               n_frames, width, height, fps, camera_model
    cameras.json            [{"fx","fy","cx","cy","q":[w,x,y,z],"t":[x,y,z]}, ...]  (camera-to-world)
    frames/frame_%06d.png   8-bit RGB
    depth/depth_%06d.pfm    single channel PFM, little-endian, rows bottom-to-top
    masks/mask_%06d.png     8-bit gray, >= 128 means dynamic
    flow/flow_%06d.flo      Middlebury .flo, forward flow t -> t+1 (N-1 files)

Invalid depth and invalid flow are stored as NaN inside the float payloads.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from stab._parallel import thread_map
from stab.errors import (
    CorruptHeader,
    DimensionMismatch,
    InvalidBundle,
    MissingFile,
    NonUnitQuaternion,
)
from stab.geometry import (
    CameraIntrinsics,
    CameraModel,
    Direction,
    Pose,
    pixel_grid,
    quat_normalize,
    transform_point,
    unproject_pixels,
)

FLO_MAGIC = b"PIEH"
UNKNOWN_FLOW_THRESH = 1e9
MASK_THRESHOLD = 128
# loose tolerance for quaternions coming from external tools; see load_bundle
INGEST_QUAT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class FlowField:
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float32)
        v = np.asarray(self.v, dtype=np.float32)
        valid = np.asarray(self.valid, dtype=bool)
        if not (u.shape == v.shape == valid.shape) or u.ndim != 2:
            raise DimensionMismatch(f"flow components have shapes {u.shape}, {v.shape}, {valid.shape}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_array(cls, uv: np.ndarray, valid: np.ndarray | None = None) -> "FlowField":
        uv = np.asarray(uv)
        finite = np.isfinite(uv[..., 0]) & np.isfinite(uv[..., 1])
        if valid is None:
            valid = finite
        else:
            valid = np.asarray(valid, dtype=bool) & finite
        return cls(uv[..., 0], uv[..., 1], valid)

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        z = np.zeros((height, width), np.float32)
        return cls(z, z.copy(), np.ones((height, width), bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def as_array(self) -> np.ndarray:
        """``(H, W, 2)`` float32 with NaN at invalid pixels."""
        uv = np.stack([self.u, self.v], axis=-1)
        uv[~self.valid] = np.nan
        return uv

    def __eq__(self, other):
        if not isinstance(other, FlowField):
            return NotImplemented
        return np.array_equal(self.valid, other.valid) and np.array_equal(
            self.as_array(), other.as_array(), equal_nan=True
        )


@dataclass(frozen=True, eq=False)
class Bundle:
    frames: np.ndarray  # (N, H, W, 3) uint8
    depths: np.ndarray  # (N, H, W) float32, non-finite = invalid
    semantic_masks: np.ndarray  # (N, H, W) bool, True = dynamic
    flows: list  # N-1 FlowField, frame t -> t+1
    cameras: list  # N (CameraIntrinsics, Pose)
    fps: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "frames", np.asarray(self.frames, dtype=np.uint8))
        object.__setattr__(self, "depths", np.asarray(self.depths, dtype=np.float32))
        object.__setattr__(self, "semantic_masks", np.asarray(self.semantic_masks, dtype=bool))
        object.__setattr__(self, "flows", list(self.flows))
        object.__setattr__(self, "cameras", [tuple(c) for c in self.cameras])
        validate_bundle(self)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def camera_model(self) -> CameraModel:
        return self.cameras[0][0].model

    @property
    def intrinsics(self) -> list:
        return [c[0] for c in self.cameras]

    @property
    def poses(self) -> list:
        return [c[1] for c in self.cameras]

    def depth_valid(self, t: int) -> np.ndarray:
        return np.isfinite(self.depths[t])

    def __eq__(self, other):
        if not isinstance(other, Bundle):
            return NotImplemented
        return (
            self.fps == other.fps
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.semantic_masks, other.semantic_masks)
            and np.array_equal(self.depths, other.depths, equal_nan=True)
            and self.flows == other.flows
            and self.cameras == other.cameras
        )


def validate_bundle(b: Bundle) -> None:
    if b.frames.ndim != 4 or b.frames.shape[-1] != 3:
        raise InvalidBundle(f"frames must be (N, H, W, 3), got {b.frames.shape}")
    n, h, w = b.frames.shape[:3]
    if n < 2:
        raise InvalidBundle(f"a bundle needs at least 2 frames, got {n}")
    if b.depths.ndim != 3 or b.depths.shape[0] != n:
        raise DimensionMismatch(f"expected {n} depth maps, got shape {b.depths.shape}")
    for i in range(n):
        if b.depths[i].shape != (h, w):
            raise DimensionMismatch(f"depth {i} has shape {b.depths[i].shape}, expected {(h, w)}", i)
    if b.semantic_masks.shape != (n, h, w):
        raise DimensionMismatch(f"masks have shape {b.semantic_masks.shape}, expected {(n, h, w)}")
    if len(b.flows) != n - 1:
        raise DimensionMismatch(f"expected {n - 1} flow fields, got {len(b.flows)}")
    for i, f in enumerate(b.flows):
        if f.shape != (h, w):
            raise DimensionMismatch(f"flow {i} has shape {f.shape}, expected {(h, w)}", i)
    if len(b.cameras) != n:
        raise DimensionMismatch(f"expected {n} cameras, got {len(b.cameras)}")
    model = b.cameras[0][0].model
    for i, (k, pose) in enumerate(b.cameras):
        if not isinstance(k, CameraIntrinsics) or not isinstance(pose, Pose):
            raise InvalidBundle(f"camera {i} must be (CameraIntrinsics, Pose)")
        if (k.height, k.width) != (h, w):
            raise DimensionMismatch(f"camera {i} is {k.width}x{k.height}, frames are {w}x{h}", i)
        if k.model is not model:
            raise InvalidBundle(f"camera {i} model {k.model.value} differs from {model.value}")
    bad = np.isfinite(b.depths) & (b.depths <= 0)
    if bad.any():
        i = int(np.argwhere(bad)[0, 0])
        raise InvalidBundle(f"depth {i} contains non-positive finite values")
    if not b.fps > 0:
        raise InvalidBundle(f"fps must be positive, got {b.fps!r}")


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path, data: np.ndarray) -> None:
    """Single-channel little-endian PFM (scale -1.0), rows stored bottom-to-top."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("write_pfm expects a 2-D array")
    h, w = data.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def _read_token_line(f, path):
    line = f.readline()
    if not line.endswith(b"\n"):
        raise CorruptHeader("PFM", path, "truncated header")
    return line.decode("ascii", errors="replace").strip()


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        ident = _read_token_line(f, path)
        if ident == "PF":
            channels = 3
        elif ident == "Pf":
            channels = 1
        else:
            raise CorruptHeader("PFM", path, f"bad identifier {ident!r}")
        try:
            w, h = (int(x) for x in _read_token_line(f, path).split())
            scale = float(_read_token_line(f, path))
        except ValueError as exc:
            raise CorruptHeader("PFM", path, str(exc)) from None
        if w < 1 or h < 1 or scale == 0:
            raise CorruptHeader("PFM", path, f"size {w}x{h}, scale {scale}")
        dtype = "<f4" if scale < 0 else ">f4"
        payload = f.read()
    count = w * h * channels
    if len(payload) != 4 * count:
        raise CorruptHeader("PFM", path, f"payload has {len(payload)} bytes, expected {4 * count}")
    data = np.frombuffer(payload, dtype=dtype).reshape(h, w, channels)[::-1]
    data = data.astype(np.float32)
    return data[..., 0] if channels == 1 else data


# ---------------------------------------------------------------------------
# Middlebury .flo


def write_flo(path, flow: FlowField) -> None:
    h, w = flow.shape
    uv = flow.as_array().astype("<f4")
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", w, h))
        f.write(uv.tobytes())


def read_flo(path) -> FlowField:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != FLO_MAGIC:
        raise CorruptHeader("FLO", path, "magic is not PIEH")
    w, h = struct.unpack("<ii", raw[4:12])
    if w < 1 or h < 1 or len(raw) - 12 != 8 * w * h:
        raise CorruptHeader("FLO", path, f"size {w}x{h} does not match payload of {len(raw) - 12} bytes")
    uv = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)
    valid = np.isfinite(uv).all(axis=-1) & (np.abs(uv) < UNKNOWN_FLOW_THRESH).all(axis=-1)
    return FlowField(uv[..., 0], uv[..., 1], valid)


# ---------------------------------------------------------------------------
# images


def write_png(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(path, format="PNG")


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    write_png(path, np.where(mask, 255, 0).astype(np.uint8))


def read_mask(path) -> np.ndarray:
    return read_gray(path) >= MASK_THRESHOLD


# ---------------------------------------------------------------------------
# cameras


def camera_to_json(k: CameraIntrinsics, pose: Pose) -> dict:
    return {
        "fx": float(k.fx),
        "fy": float(k.fy),
        "cx": float(k.cx),
        "cy": float(k.cy),
        "q": [float(x) for x in pose.q],
        "t": [float(x) for x in pose.t],
    }


def pose_to_json(pose: Pose) -> dict:
    return {"q": [float(x) for x in pose.q], "t": [float(x) for x in pose.t]}


def pose_from_json(entry: dict, index: int = 0) -> Pose:
    q = np.asarray(entry["q"], dtype=np.float64)
    t = np.asarray(entry["t"], dtype=np.float64)
    if q.shape != (4,) or t.shape != (3,):
        raise InvalidBundle(f"camera {index}: q must have 4 entries and t 3")
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > INGEST_QUAT_TOL:
        raise NonUnitQuaternion(index, norm)
    if abs(norm - 1.0) > 1e-12:
        q = quat_normalize(q)
    return Pose(q, t)


def _load_json(path: Path):
    if not path.is_file():
        raise MissingFile(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptHeader("JSON", path, str(exc)) from None


def frame_path(root, t: int) -> Path:
    return Path(root) / "frames" / f"frame_{t:06d}.png"


def load_bundle(path) -> Bundle:
    root = Path(path)
    if not root.is_dir():
        raise MissingFile(root)
    meta = _load_json(root / "meta.json")
    try:
        n = int(meta["n_frames"])
        w = int(meta["width"])
        h = int(meta["height"])
        fps = float(meta["fps"])
        model = CameraModel.parse(meta["camera_model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptHeader("meta.json", root / "meta.json", str(exc)) from None
    if n < 2:
        raise InvalidBundle(f"a bundle needs at least 2 frames, got {n}")

    cams_json = _load_json(root / "cameras.json")
    if not isinstance(cams_json, list) or len(cams_json) != n:
        raise DimensionMismatch(f"cameras.json must list {n} cameras")
    cameras = []
    for i, c in enumerate(cams_json):
        try:
            k = CameraIntrinsics(model, float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]), w, h)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptHeader("cameras.json", root / "cameras.json", f"entry {i}: {exc}") from None
        cameras.append((k, pose_from_json(c, i)))

    def need(p: Path) -> Path:
        if not p.is_file():
            raise MissingFile(p)
        return p

    def load_frame(i):
        img = read_rgb(need(frame_path(root, i)))
        if img.shape[:2] != (h, w):
            raise DimensionMismatch(f"frame {i} is {img.shape[1]}x{img.shape[0]}, expected {w}x{h}", i)
        depth = read_pfm(need(root / "depth" / f"depth_{i:06d}.pfm"))
        if depth.shape != (h, w):
            raise DimensionMismatch(f"depth {i} is {depth.shape[1]}x{depth.shape[0]}, expected {w}x{h}", i)
        mask = read_mask(need(root / "masks" / f"mask_{i:06d}.png"))
        if mask.shape != (h, w):
            raise DimensionMismatch(f"mask {i} is {mask.shape[1]}x{mask.shape[0]}, expected {w}x{h}", i)
        flow = None
        if i < n - 1:
            flow = read_flo(need(root / "flow" / f"flow_{i:06d}.flo"))
            if flow.shape != (h, w):
                raise DimensionMismatch(f"flow {i} is {flow.shape[1]}x{flow.shape[0]}, expected {w}x{h}", i)
        return img, depth, mask, flow

    loaded = thread_map(load_frame, range(n))
    return Bundle(
        frames=np.stack([x[0] for x in loaded]),
        depths=np.stack([x[1] for x in loaded]),
        semantic_masks=np.stack([x[2] for x in loaded]),
        flows=[x[3] for x in loaded[:-1]],
        cameras=cameras,
        fps=fps,
    )


def save_bundle(b: Bundle, path) -> None:
    root = Path(path)
    for sub in ("frames", "depth", "masks", "flow"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    meta = {
        "n_frames": b.n_frames,
        "width": b.width,
        "height": b.height,
        "fps": float(b.fps),
        "camera_model": b.camera_model.value,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    cams = [camera_to_json(k, p) for k, p in b.cameras]
    (root / "cameras.json").write_text(json.dumps(cams, indent=2) + "\n")

    def save_frame(i):
        write_png(frame_path(root, i), b.frames[i])
        write_pfm(root / "depth" / f"depth_{i:06d}.pfm", b.depths[i])
        write_mask(root / "masks" / f"mask_{i:06d}.png", b.semantic_masks[i])
        if i < b.n_frames - 1:
            write_flo(root / "flow" / f"flow_{i:06d}.flo", b.flows[i])

    thread_map(save_frame, range(b.n_frames))


def pointmap_of_frame(b: Bundle, t: int) -> np.ndarray:
    """World-space point per pixel of frame ``t``; NaN where the depth is invalid."""
    k, pose = b.cameras[t]
    depth = b.depths[t].astype(np.float64)
    valid = np.isfinite(depth)
    pts = unproject_pixels(pixel_grid(b.height, b.width), np.where(valid, depth, 1.0), k)
    world = transform_point(pts, pose, Direction.CAM_TO_WORLD)
    world[~valid] = np.nan
    return world


def directory_checksum(path) -> str:
    """SHA-256 over relative paths and contents of every file below ``path``."""
    root = Path(path)
    h = hashlib.sha256()
    for p in sorted(x for x in root.rglob("*") if x.is_file()):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()
