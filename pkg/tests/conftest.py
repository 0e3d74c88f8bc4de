import numpy as np
import pytest

from stab.bundle import Bundle, FlowField
from stab.geometry import CameraIntrinsics, CameraModel, Pose
from stab.synth import default_spec, generate_scene, mover_spec


def random_bundle(n=3, h=6, w=8, seed=0, model=CameraModel.PERSPECTIVE):
    """Small bundle of random content with some invalid depth and flow pixels."""
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, (n, h, w, 3), dtype=np.uint8)
    depths = rng.uniform(0.5, 10, (n, h, w)).astype(np.float32)
    depths[rng.random((n, h, w)) < 0.1] = np.nan
    depths[0, 0, 0] = np.inf
    masks = rng.random((n, h, w)) < 0.3
    flows = []
    for _ in range(n - 1):
        uv = rng.normal(scale=3, size=(h, w, 2)).astype(np.float32)
        flows.append(FlowField.from_array(uv, rng.random((h, w)) > 0.2))
    cams = []
    for i in range(n):
        k = CameraIntrinsics(model, 7.0 + i, 7.5, (w - 1) / 2, (h - 1) / 2, w, h)
        q = rng.normal(size=4)
        cams.append((k, Pose.from_qt(q, rng.normal(size=3))))
    return Bundle(frames, depths, masks, flows, cams, fps=24.0)


@pytest.fixture
def small_bundle():
    return random_bundle()


@pytest.fixture(scope="session")
def static_scene():
    """Jittered static scene, 24 frames at 96x96."""
    spec = default_spec(seed=3, n_frames=24, width=96, height=96)
    spec.camera.fx = spec.camera.fy = 80.0
    return generate_scene(spec)


@pytest.fixture(scope="session")
def mover_scene():
    return generate_scene(mover_spec(seed=1))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
