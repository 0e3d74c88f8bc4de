"""Hybrid dynamic mask: rigid-flow residual mask fused with the semantic mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from stab.bundle import Bundle, FlowField, pointmap_of_frame
from stab.errors import DimensionMismatch
from stab.geometry import Direction, pixel_grid, project_points, transform_point


@dataclass(frozen=True)
class MaskParams:
    tau: float = 2.0
    dilate: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau!r}")


def rigid_flow(b: Bundle, t: int) -> FlowField:
    """Flow frame ``t`` -> ``t + 1`` induced by camera motion alone over a static scene.

    Both projections use frame ``t``'s intrinsics.
    """
    if not 0 <= t < b.n_frames - 1:
        raise IndexError(f"rigid flow needs 0 <= t < {b.n_frames - 1}, got {t}")
    k = b.cameras[t][0]
    world = pointmap_of_frame(b, t)
    cam_next = transform_point(world, b.cameras[t + 1][1], Direction.WORLD_TO_CAM)
    uv, ok = project_points(cam_next, k)
    flow = uv - pixel_grid(b.height, b.width)
    valid = ok & np.isfinite(world[..., 0])
    return FlowField.from_array(flow, valid)


def _require_same_shape(*arrays):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DimensionMismatch(f"shape mismatch: {sorted(shapes)}")


def flow_residual_mask(f_o: FlowField, f_r: FlowField, p: MaskParams) -> np.ndarray:
    """True where both flows are valid and ``||f_o - f_r||_2 > tau``."""
    _require_same_shape(f_o.u, f_r.u)
    du = f_o.u.astype(np.float64) - f_r.u
    dv = f_o.v.astype(np.float64) - f_r.v
    both = f_o.valid & f_r.valid
    with np.errstate(invalid="ignore"):
        return both & (np.hypot(du, dv) > p.tau)


def combine_masks(m: np.ndarray, fm: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=bool)
    fm = np.asarray(fm, dtype=bool)
    _require_same_shape(m, fm)
    return m | fm


def dilate_mask(mask: np.ndarray, pixels: int = 1) -> np.ndarray:
    if pixels <= 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool), iterations=pixels)


def geometric_masks(b: Bundle, p: MaskParams) -> list:
    """FM_t for every frame. The last frame has no forward flow and gets an empty mask."""
    out = []
    for t in range(b.n_frames - 1):
        out.append(flow_residual_mask(b.flows[t], rigid_flow(b, t), p))
    out.append(np.zeros((b.height, b.width), bool))
    return out


def hybrid_masks(b: Bundle, p: MaskParams) -> list:
    """Combined masks CM_t = M_t | FM_t, optionally dilated by one pixel."""
    cms = [combine_masks(m, fm) for m, fm in zip(b.semantic_masks, geometric_masks(b, p))]
    if p.dilate:
        cms = [dilate_mask(cm) for cm in cms]
    return cms
