import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stab.bundle import Bundle, FlowField, pointmap_of_frame
from stab.errors import DimensionMismatch
from stab.geometry import (
    CameraIntrinsics,
    CameraModel,
    Direction,
    Pose,
    project_points,
    quat_from_axis_angle,
    transform_point,
)
from stab.masking import (
    MaskParams,
    combine_masks,
    dilate_mask,
    flow_residual_mask,
    geometric_masks,
    hybrid_masks,
    rigid_flow,
)

H, W = 9, 11
K = CameraIntrinsics(CameraModel.PERSPECTIVE, 20.0, 20.0, 5.0, 4.0, W, H)


def two_frame_bundle(pose_b, depth=4.0, k=K):
    frames = np.zeros((2, k.height, k.width, 3), np.uint8)
    depths = np.full((2, k.height, k.width), depth, np.float32)
    masks = np.zeros((2, k.height, k.width), bool)
    return Bundle(frames, depths, masks, [FlowField.zeros(k.height, k.width)], [(k, Pose.identity()), (k, pose_b)])


def flow(u, v, valid=None):
    u = np.asarray(u, np.float32)
    return FlowField(u, np.asarray(v, np.float32), np.ones(u.shape, bool) if valid is None else valid)


def iou(a, b):
    return (a & b).sum() / max((a | b).sum(), 1)


# rigid flow


@pytest.mark.parametrize("model", list(CameraModel))
def test_rigid_flow_zero_for_identical_poses(model):
    f = rigid_flow(two_frame_bundle(Pose.identity(), k=K.with_model(model)), 0)
    assert f.valid[1:].all()
    assert np.abs(f.u[1:]).max() < 1e-9 and np.abs(f.v[1:]).max() < 1e-9


def test_rigid_flow_translation_oracle():
    dx, depth = 0.3, 4.0
    f = rigid_flow(two_frame_bundle(Pose(np.array([1.0, 0, 0, 0]), np.array([dx, 0, 0])), depth), 0)
    assert f.valid.all()
    np.testing.assert_allclose(f.u, -K.fx * dx / depth, atol=1e-5)
    np.testing.assert_allclose(f.v, 0.0, atol=1e-5)


def test_rigid_flow_roll_oracle():
    theta = 0.1
    f = rigid_flow(two_frame_bundle(Pose(quat_from_axis_angle([0, 0, 1], theta), np.zeros(3))), 0)
    c, s = math.cos(-theta), math.sin(-theta)
    for u, v in [(0, 0), (10, 0), (0, 8), (7, 3)]:
        x, y = u - K.cx, v - K.cy
        expected = (c * x - s * y - x, s * x + c * y - y)
        np.testing.assert_allclose([f.u[v, u], f.v[v, u]], expected, atol=1e-5)


def test_rigid_flow_invalid_where_behind_next_camera():
    # next camera turned around: everything lands behind it
    f = rigid_flow(two_frame_bundle(Pose(quat_from_axis_angle([0, 1, 0], math.pi), np.zeros(3))), 0)
    assert not f.valid.any()


def test_rigid_flow_invalid_depth_propagates():
    b = two_frame_bundle(Pose.identity())
    depths = b.depths.copy()
    depths[0, 2, 3] = np.nan
    b2 = Bundle(b.frames, depths, b.semantic_masks, b.flows, b.cameras)
    f = rigid_flow(b2, 0)
    assert not f.valid[2, 3] and f.valid.sum() == H * W - 1


def test_rigid_flow_matches_generator_on_static_scene(static_scene):
    b, _ = static_scene
    worst = 0.0
    for t in range(b.n_frames - 1):
        fr, fo = rigid_flow(b, t), b.flows[t]
        both = fr.valid & fo.valid
        worst = max(worst, np.abs(fr.u - fo.u)[both].max(), np.abs(fr.v - fo.v)[both].max())
    assert worst < 1e-3


# residual mask


def test_identical_flows_give_empty_mask():
    rng = np.random.default_rng(0)
    f = flow(rng.normal(size=(4, 5)) * 5, rng.normal(size=(4, 5)) * 5)
    assert not flow_residual_mask(f, f, MaskParams(2.0)).any()


def test_residual_exactly_tau_is_not_dynamic():
    z = np.zeros((1, 3))
    fo = flow([[2.0, 2.5, 0.0]], [[0.0, 0.0, -2.0]])
    fm = flow_residual_mask(fo, flow(z, z), MaskParams(2.0))
    assert fm.tolist() == [[False, True, False]]


def test_invalid_pixels_are_static():
    z = np.zeros((1, 2))
    fo = flow([[9.0, 9.0]], z, valid=np.array([[False, True]]))
    fr = flow(z, z, valid=np.array([[True, False]]))
    assert not flow_residual_mask(fo, fr, MaskParams(1.0)).any()


def test_residual_mask_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        flow_residual_mask(flow(np.zeros((2, 2)), np.zeros((2, 2))), flow(np.zeros((2, 3)), np.zeros((2, 3))), MaskParams())


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float32, (4, 4, 4), elements=st.floats(-20, 20, width=32)),
    st.floats(-50, 50, width=32),
    st.floats(-50, 50, width=32),
)
def test_residual_mask_translation_invariant(a, cu, cv):
    p = MaskParams(1.5)
    fo, fr = flow(a[0], a[1]), flow(a[2], a[3])
    shifted = flow_residual_mask(flow(a[0] + cu, a[1] + cv), flow(a[2] + cu, a[3] + cv), p)
    base = flow_residual_mask(fo, fr, p)
    # float32 shifting can move a residual across tau only when it is within rounding of it
    r = np.hypot(a[0].astype(float) - a[2], a[1].astype(float) - a[3])
    near = np.abs(r - p.tau) < 1e-3 * (1 + abs(cu) + abs(cv))
    assert np.array_equal(shifted[~near], base[~near])


def test_mover_footprint_iou(mover_scene):
    b, gt = mover_scene
    fm = geometric_masks(b, MaskParams(2.0))
    ious = [iou(fm[t], gt.dynamic[t]) for t in range(b.n_frames - 1)]
    assert min(ious) > 0.8
    cm = hybrid_masks(b, MaskParams(2.0))
    assert min(iou(cm[t], gt.dynamic[t]) for t in range(b.n_frames)) > 0.8


def test_mover_flow_differs_from_rigid_by_projected_velocity(mover_scene):
    b, gt = mover_scene
    t = 5
    vel = np.asarray(gt.spec.movers[0].velocity)
    pose = b.cameras[t + 1][1]
    fr, fo = rigid_flow(b, t), b.flows[t]
    vs, us = np.nonzero(gt.dynamic[t] & fr.valid)
    world = pointmap_of_frame(b, t)[vs, us]
    moved, _ = project_points(transform_point(world + vel, pose, Direction.WORLD_TO_CAM), b.cameras[t][0])
    still, _ = project_points(transform_point(world, pose, Direction.WORLD_TO_CAM), b.cameras[t][0])
    np.testing.assert_allclose(fo.u[vs, us] - fr.u[vs, us], (moved - still)[:, 0], atol=1e-3)
    np.testing.assert_allclose(fo.v[vs, us] - fr.v[vs, us], (moved - still)[:, 1], atol=1e-3)


def test_last_frame_has_empty_geometric_mask(mover_scene):
    b, _ = mover_scene
    assert not geometric_masks(b, MaskParams())[-1].any()


# combination


def test_truth_table():
    for m, fm in itertools.product([False, True], repeat=2):
        assert combine_masks(np.array([m]), np.array([fm]))[0] == (m or fm)


@settings(max_examples=50, deadline=None)
@given(arrays(bool, (2, 6, 7)))
def test_combine_algebra(x):
    a, b = x
    empty = np.zeros_like(a)
    np.testing.assert_array_equal(combine_masks(a, empty), a)
    np.testing.assert_array_equal(combine_masks(a, b), combine_masks(b, a))
    np.testing.assert_array_equal(combine_masks(a, a), a)
    cm = combine_masks(a, b)
    assert np.all(cm >= a) and np.all(cm >= b)


def test_combine_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        combine_masks(np.zeros((2, 2), bool), np.zeros((3, 2), bool))


def test_dilation_grows_by_one_pixel():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    d = dilate_mask(m)
    assert d.sum() == 9 and d[1:4, 1:4].all()


def test_hybrid_contains_semantic_and_geometric(mover_scene):
    b, _ = mover_scene
    p = MaskParams(2.0, dilate=False)
    for cm, m, fm in zip(hybrid_masks(b, p), b.semantic_masks, geometric_masks(b, p)):
        assert np.all(cm >= m) and np.all(cm >= fm)
