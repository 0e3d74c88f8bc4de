import numpy as np
import pytest

from stab.bundle import Bundle, FlowField
from stab.geometry import CameraIntrinsics, CameraModel, Pose
from stab.render import (
    CompositePointSet,
    Points,
    RenderParams,
    build_point_set,
    fill_holes,
    pull_push,
    render,
)
from stab.smoothing import Trajectory
from stab.synth import BasePath, CameraSpec, Jitter, Rect, SceneSpec, Texture, generate_scene, render_view

K = CameraIntrinsics(CameraModel.PERSPECTIVE, 10.0, 10.0, 4.0, 3.0, 9, 7)


def points(pos, colors, frames=None, pixels=None):
    pos = np.asarray(pos, float).reshape(-1, 3)
    n = len(pos)
    return Points(
        pos,
        np.asarray(colors, np.uint8).reshape(-1, 3),
        np.zeros(n, np.int64) if frames is None else np.asarray(frames, np.int64),
        np.arange(n, dtype=np.int64) if pixels is None else np.asarray(pixels, np.int64),
    )


def static_set(pts):
    return CompositePointSet(pts, Points.empty())


def no_masks(b):
    return [np.zeros((b.height, b.width), bool) for _ in range(b.n_frames)]


def pan_spec(n_frames=16, velocity=0.3):
    tex = Texture(period=2.0, colors=[[210, 190, 150], [90, 110, 160]], sharpness=2.0, noise=18.0, seed=1)
    return SceneSpec(
        seed=0,
        n_frames=n_frames,
        width=96,
        height=64,
        camera=CameraSpec("perspective", 80.0, 80.0),
        layout=[Rect("z", 10.0, [[-60.0, 60.0], [-60.0, 60.0]], tex)],
        base_path=BasePath(velocity=[velocity, 0.0, 0.0]),
        jitter=Jitter(translation=[0.0, 0.0, 0.0], rotation=[0.0, 0.0, 0.0]),
    )


@pytest.fixture(scope="module")
def pan():
    return generate_scene(pan_spec())


# rasterization


def test_single_point_on_axis():
    res = render(static_set(points([0, 0, 2], [10, 20, 30])), Pose.identity(), K, RenderParams(splat_radius=0))
    assert res.coverage.sum() == 1 and res.coverage[3, 4]
    assert res.image[3, 4].tolist() == [10, 20, 30]
    others = ~res.coverage
    assert (res.image[others] == 0).all()
    assert res.zbuffer[3, 4] == 2.0 and np.isinf(res.zbuffer[others]).all()


def test_nearer_point_wins():
    pts = points([[0, 0, 5], [0, 0, 2]], [[255, 0, 0], [0, 255, 0]])
    res = render(static_set(pts), Pose.identity(), K, RenderParams(splat_radius=0))
    assert res.image[3, 4].tolist() == [0, 255, 0]
    assert res.zbuffer[3, 4] == 2.0


def test_exact_depth_tie_broken_by_source_key():
    pts = points([[0, 0, 2], [0, 0, 2]], [[255, 0, 0], [0, 0, 255]], frames=[3, 1], pixels=[0, 50])
    for tol in (0.0, 0.05):
        res = render(static_set(pts), Pose.identity(), K, RenderParams(splat_radius=0, depth_tolerance=tol))
        assert res.image[3, 4].tolist() == [0, 0, 255]
        assert res.source_frame[3, 4] == 1


def test_strict_depth_test_ignores_splat_center():
    # with no tolerance the nearer splat owns its whole footprint
    pts = points([[0, 0, 2.0], [0.202, 0, 2.02]], [[255, 0, 0], [0, 0, 255]])
    strict = render(static_set(pts), Pose.identity(), K, RenderParams(splat_radius=1, depth_tolerance=0.0))
    assert strict.image[3, 5].tolist() == [255, 0, 0]
    # within tolerance the splat centered on the pixel wins
    loose = render(static_set(pts), Pose.identity(), K, RenderParams(splat_radius=1, depth_tolerance=0.05))
    assert loose.image[3, 5].tolist() == [0, 0, 255]
    assert loose.image[3, 4].tolist() == [255, 0, 0]


def test_square_footprint():
    res = render(static_set(points([0, 0, 2], [1, 2, 3])), Pose.identity(), K, RenderParams(splat_radius=1))
    assert res.coverage.sum() == 9 and res.coverage[2:5, 3:6].all()


def test_footprint_clipped_at_border():
    # projects to (-1, 0): only the right half of the footprint lands
    res = render(static_set(points([-0.5, -0.3, 1.0], [1, 2, 3])), Pose.identity(), K, RenderParams(splat_radius=1))
    assert res.coverage.sum() == 2 and res.coverage[0:2, 0].all()


def test_empty_set_renders_all_holes():
    p = RenderParams(hole_color=(1, 2, 3))
    res = render(static_set(Points.empty()), Pose.identity(), K, p)
    assert not res.coverage.any()
    assert (res.image == [1, 2, 3]).all()


def test_points_behind_camera_ignored():
    res = render(static_set(points([0, 0, -2], [9, 9, 9])), Pose.identity(), K, RenderParams())
    assert not res.coverage.any()


def test_dynamic_points_flagged():
    ps = CompositePointSet(points([0, 0, 3], [1, 1, 1]), points([0.4, 0, 2], [2, 2, 2]))
    res = render(ps, Pose.identity(), K, RenderParams(splat_radius=0))
    assert res.dynamic[3, 6] and not res.dynamic[3, 4]


def test_render_invariants_and_determinism(static_scene):
    b, gt = static_scene
    cm = no_masks(b)
    p = RenderParams()
    ps = build_point_set(b, cm, 10, p)
    pose = gt.clean.poses[10]
    a = render(ps, pose, b.intrinsics[10], p)
    c = render(ps, pose, b.intrinsics[10], p)
    assert a.image.tobytes() == c.image.tobytes()
    assert np.array_equal(np.isfinite(a.zbuffer), a.coverage)
    assert (a.image[~a.coverage] == 0).all()


# point sets


def test_point_set_window_zero(static_scene):
    b, _ = static_scene
    ps = build_point_set(b, no_masks(b), 4, RenderParams(window_n=0))
    assert len(ps.dynamic_points) == 0
    assert len(ps.static_points) == np.isfinite(b.depths[4]).sum()
    assert set(ps.static_points.source_frame.tolist()) == {4}
    np.testing.assert_array_equal(ps.static_points.colors, b.frames[4].reshape(-1, 3)[ps.static_points.source_pixel])


def test_point_set_partition(static_scene):
    b, _ = static_scene
    cm = no_masks(b)
    cm[4] = np.ones_like(cm[4])
    ps = build_point_set(b, cm, 4, RenderParams(window_n=1))
    assert 4 not in set(ps.static_points.source_frame.tolist())
    assert len(ps.dynamic_points) == np.isfinite(b.depths[4]).sum()
    assert set(ps.dynamic_points.source_frame.tolist()) == {4}


def test_point_set_counting_oracle():
    spec = pan_spec(n_frames=5, velocity=0.05)
    spec.layout[0].extent = [[-3.0, 3.0], [-2.0, 2.0]]  # leaves some sky
    b, _ = generate_scene(spec)
    ps = build_point_set(b, no_masks(b), 2, RenderParams(window_n=2))
    expected = sum(int(np.isfinite(b.depths[i]).sum()) for i in range(5))
    assert expected < 5 * b.height * b.width
    assert len(ps.static_points) == expected


def test_point_set_clamps_window(static_scene):
    b, _ = static_scene
    ps = build_point_set(b, no_masks(b), 0, RenderParams(window_n=3))
    assert sorted(set(ps.static_points.source_frame.tolist())) == [0, 1, 2, 3]


# identity and monotonicity


@pytest.mark.parametrize("model", ["perspective", "fisheye"])
def test_radius_zero_identity_rerender(model):
    spec = pan_spec(n_frames=4)
    spec.camera.model = model
    b, _ = generate_scene(spec)
    t = 2
    p = RenderParams(window_n=0, splat_radius=0)
    res = render(build_point_set(b, no_masks(b), t, p), b.poses[t], b.intrinsics[t], p)
    assert res.coverage.all()
    assert res.image.tobytes() == b.frames[t].tobytes()


def test_own_pose_rerender_with_window(pan):
    b, _ = pan
    t = 6
    p = RenderParams(window_n=2, splat_radius=1)
    res = render(build_point_set(b, no_masks(b), t, p), b.poses[t], b.intrinsics[t], p)
    same = (res.image == b.frames[t]).all(axis=-1)[res.coverage]
    assert same.mean() > 0.99


def test_coverage_monotone_in_window(static_scene):
    b, gt = static_scene
    cm = no_masks(b)
    prev = None
    for n in range(4):
        p = RenderParams(window_n=n)
        cov = render(build_point_set(b, cm, 12, p), gt.clean.poses[12], b.intrinsics[12], p).coverage
        if prev is not None:
            assert np.all(cov >= prev)
        prev = cov


def test_render_model_override(static_scene):
    b, gt = static_scene
    p = RenderParams()
    ps = build_point_set(b, no_masks(b), 8, p)
    fish = b.intrinsics[8].with_model("fisheye")
    res = render(ps, gt.clean.poses[8], fish, p)
    assert 0.2 < res.coverage.mean() < 1.0


# hole filling


def test_pull_push_constant_fill():
    img = np.full((9, 9, 3), 77.0)
    known = np.ones((9, 9), bool)
    known[4, 4] = False
    img[4, 4] = 0
    out = pull_push(img, known)
    np.testing.assert_allclose(out[4, 4], 77.0)
    np.testing.assert_array_equal(out[known], img[known])


def test_pull_push_large_hole_is_bounded():
    rng = np.random.default_rng(0)
    img = rng.uniform(10, 200, (33, 17, 3))
    known = rng.random((33, 17)) < 0.2
    out = pull_push(img, known)
    assert out[~known].min() >= img[known].min() - 1e-9
    assert out[~known].max() <= img[known].max() + 1e-9


def test_fill_without_holes_is_identity(static_scene):
    b, gt = static_scene
    p = RenderParams(window_n=0, splat_radius=0)
    cm = no_masks(b)
    renders = [render(build_point_set(b, cm, t, p), b.poses[t], b.intrinsics[t], p) for t in range(3)]
    assert all(r.coverage.all() for r in renders)
    out = fill_holes(renders, b, Trajectory(tuple(b.poses[:3])), p, masks=cm)
    for r, f in zip(renders, out):
        assert f.image.tobytes() == r.image.tobytes()
        assert f.report.temporal_filled == f.report.spatial_filled == 0


def test_single_hole_in_constant_surroundings():
    h, w = 5, 5
    k = CameraIntrinsics(CameraModel.PERSPECTIVE, 5.0, 5.0, 2.0, 2.0, w, h)
    frames = np.full((2, h, w, 3), 120, np.uint8)
    depths = np.ones((2, h, w), np.float32)
    depths[:, 2, 2] = np.nan
    b = Bundle(frames, depths, np.zeros((2, h, w), bool), [FlowField.zeros(h, w)], [(k, Pose.identity())] * 2)
    p = RenderParams(window_n=0, splat_radius=0)
    cm = no_masks(b)
    renders = [render(build_point_set(b, cm, t, p), b.poses[t], k, p) for t in range(2)]
    assert not renders[0].coverage[2, 2]
    out = fill_holes(renders, b, Trajectory(tuple(b.poses)), p, masks=cm)
    assert out[0].image[2, 2].tolist() == [120, 120, 120]
    assert out[0].report.spatial_filled == 1


def test_border_disocclusion_filled_temporally(pan):
    b, _ = pan
    spec = pan_spec()
    cam = b.intrinsics[0]
    # shift the view so that a strip of ~10% of the width lies past what the n=3 window saw
    strip = 0.1 * cam.width / cam.fx * 10.0
    shift = 3 * 0.3 + strip
    poses = [Pose(q.q, q.t + np.array([shift, 0.0, 0.0])) for q in b.poses]
    p = RenderParams()
    cm = no_masks(b)
    renders = [render(build_point_set(b, cm, t, p), poses[t], cam, p) for t in range(b.n_frames)]
    out = fill_holes(renders, b, Trajectory(tuple(poses)), p, masks=cm)
    t = 6
    holes = ~renders[t].coverage
    assert 0.08 < holes.mean() < 0.12
    assert out[t].temporal.sum() >= 0.7 * holes.sum()
    truth = render_view(spec, poses[t], cam, t).astype(float)
    err = np.abs(out[t].image.astype(float) - truth)[holes].mean() / 255.0
    assert err < 10 / 255
    for f in out:
        assert f.report.holes_remaining == 0
        assert f.report.render_covered + f.report.temporal_filled + f.report.spatial_filled == b.height * b.width
