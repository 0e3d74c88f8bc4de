"""Geometric video stabilization from reconstruction bundles.

Smooths a camera trajectory, separates dynamic pixels with a hybrid
semantic/rigid-flow mask, re-renders every frame from a windowed point
cloud along the smoothed path and fills the remaining holes.
"""

from stab.geometry import CameraIntrinsics, CameraModel, Pose

__all__ = ["CameraIntrinsics", "CameraModel", "Pose"]
__version__ = "0.1.0"
