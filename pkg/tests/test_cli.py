import json
import shutil
import subprocess
import sys

import pytest

import stab.smoothing as smoothing
from stab.bundle import directory_checksum, load_bundle
from stab.cli import EXIT_BUNDLE, EXIT_LENGTH, EXIT_OK, EXIT_ROTATION, EXIT_SPEC, main
from stab.metrics import warping_error
from stab.synth import default_spec


@pytest.fixture(scope="module")
def spec_path(tmp_path_factory):
    spec = default_spec(seed=2, n_frames=20, width=64, height=48)
    spec.camera.fx = spec.camera.fy = 55.0
    path = tmp_path_factory.mktemp("spec") / "synth.json"
    spec.save(path)
    return path


@pytest.fixture(scope="module")
def bundle_dir(spec_path):
    out = spec_path.parent / "bundle"
    assert main(["synth", str(spec_path), "-o", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def stabilized_dir(bundle_dir):
    out = bundle_dir.parent / "out"
    assert main(["stabilize", str(bundle_dir), "-o", str(out)]) == EXIT_OK
    return out


def test_synth_writes_a_loadable_bundle(bundle_dir):
    assert load_bundle(bundle_dir).n_frames == 20


def test_synth_default_output_location(spec_path):
    assert main(["synth", str(spec_path)]) == EXIT_OK
    assert (spec_path.parent / "synth_bundle" / "meta.json").is_file()


def test_synth_same_seed_same_bytes(spec_path, bundle_dir, tmp_path):
    assert main(["synth", str(spec_path), "-o", str(tmp_path / "again")]) == EXIT_OK
    assert directory_checksum(tmp_path / "again") == directory_checksum(bundle_dir)


def test_synth_malformed_spec(tmp_path, capsys):
    doc = default_spec().to_dict()
    doc["unknown_key"] = 1
    (tmp_path / "s.json").write_text(json.dumps(doc))
    assert main(["synth", str(tmp_path / "s.json")]) == EXIT_SPEC
    err = capsys.readouterr().err
    assert "code=2" in err and "SpecError" in err


def test_default_spec_command(tmp_path):
    assert main(["default-spec", str(tmp_path / "d.json"), "--movers", "--seed", "3"]) == EXIT_OK
    assert json.loads((tmp_path / "d.json").read_text())["movers"]


def test_stabilize_writes_every_frame(stabilized_dir):
    for sub, n in (("stabilized", 20), ("coverage", 20), ("flow", 19)):
        assert len(list((stabilized_dir / sub).iterdir())) == n
    for name in ("meta.json", "cameras.json", "trajectory.json", "fill_report.json", "config.json"):
        assert (stabilized_dir / name).is_file()
    assert not (stabilized_dir / "masks_combined").exists()


def test_stabilize_one_frame_bundle(bundle_dir, tmp_path):
    bad = tmp_path / "bad"
    shutil.copytree(bundle_dir, bad)
    meta = json.loads((bad / "meta.json").read_text())
    meta["n_frames"] = 1
    (bad / "meta.json").write_text(json.dumps(meta))
    assert main(["stabilize", str(bad), "-o", str(tmp_path / "o")]) == EXIT_BUNDLE


def test_stabilize_missing_bundle(tmp_path):
    assert main(["stabilize", str(tmp_path / "nope")]) == EXIT_BUNDLE


def test_stabilize_degenerate_rotation(bundle_dir, tmp_path, monkeypatch):
    monkeypatch.setattr(smoothing, "DEGENERATE_NORM", 2.0)
    assert main(["stabilize", str(bundle_dir), "-o", str(tmp_path / "o")]) == EXIT_ROTATION


def test_config_file_and_flag_override(bundle_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sigma": 3.0, "tau": 1.5, "emit_diagnostics": True}))
    out = tmp_path / "o"
    assert main(["stabilize", str(bundle_dir), "-o", str(out), "--config", str(cfg), "--sigma", "5"]) == EXIT_OK
    used = json.loads((out / "config.json").read_text())
    assert used["sigma"] == 5.0 and used["tau"] == 1.5
    assert len(list((out / "masks_combined").iterdir())) == 20


@pytest.mark.parametrize("doc", [{"sigmaa": 3.0}, {"sigma": -1.0}, {"render_model": "pinhole"}, [1, 2]])
def test_bad_config(bundle_dir, tmp_path, doc):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    assert main(["stabilize", str(bundle_dir), "-o", str(tmp_path / "o"), "--config", str(cfg)]) == EXIT_SPEC


def test_evaluate_report(bundle_dir, stabilized_dir):
    assert main(["evaluate", str(bundle_dir), str(stabilized_dir)]) == EXIT_OK
    report = json.loads((stabilized_dir / "report.json").read_text())
    assert report["cropping"] == 1.0
    assert report["ese_px2"] < 0.5
    assert report["lpips"] is None
    assert len(report["per_frame"]) == 20


def test_evaluate_smoothed_beats_raw(bundle_dir, stabilized_dir, tmp_path):
    assert main(["evaluate", str(bundle_dir), str(stabilized_dir), "--report", str(tmp_path / "s.json")]) == EXIT_OK
    assert main(["evaluate", str(bundle_dir), str(bundle_dir), "--report", str(tmp_path / "r.json")]) == EXIT_OK
    smoothed = json.loads((tmp_path / "s.json").read_text())
    raw = json.loads((tmp_path / "r.json").read_text())
    assert smoothed["stability"] > raw["stability"]


def test_evaluate_bundle_against_itself(bundle_dir, tmp_path):
    assert main(["evaluate", str(bundle_dir), str(bundle_dir), "--report", str(tmp_path / "r.json")]) == EXIT_OK
    report = json.loads((tmp_path / "r.json").read_text())
    b = load_bundle(bundle_dir)
    assert report["cropping"] == 1.0
    assert report["we_x1e3"] == pytest.approx(warping_error(list(b.frames), b.flows), rel=1e-9)
    assert report["ese_px2"] < 1e-6


def test_evaluate_length_mismatch(bundle_dir, stabilized_dir, tmp_path):
    short = tmp_path / "short"
    shutil.copytree(stabilized_dir, short)
    (short / "stabilized" / "frame_000019.png").unlink()
    assert main(["evaluate", str(bundle_dir), str(short)]) == EXIT_LENGTH


def test_console_entry_point(spec_path, tmp_path):
    out = tmp_path / "b"
    proc = subprocess.run([sys.executable, "-m", "stab.cli", "synth", str(spec_path), "-o", str(out)], capture_output=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "stab.cli", "stabilize", str(tmp_path / "missing")], capture_output=True, text=True)
    assert proc.returncode == EXIT_BUNDLE
    assert "code=3" in proc.stderr


def test_output_independent_of_thread_count(bundle_dir, tmp_path, monkeypatch):
    sums = []
    for threads in ("1", "3"):
        monkeypatch.setenv("STAB_THREADS", threads)
        assert main(["stabilize", str(bundle_dir), "-o", str(tmp_path / threads)]) == EXIT_OK
        sums.append(directory_checksum(tmp_path / threads))
    assert sums[0] == sums[1]
