import subprocess
import sys

import h5py
import numpy as np
import pytest
from PIL import Image

from nyu_ingest.convert import IngestConfig, IngestError, convert


def write_fixture(path, n=3, h=96, w=128, seed=0, depth_scale=5.0):
    """Archive with the labeled-NYU HDF5 layout: images (N,3,W,H) uint8,
    depths (N,W,H) float meters."""
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, 3, w, h), dtype=np.uint8)
    depths = rng.uniform(0.5, depth_scale, size=(n, w, h))
    with h5py.File(path, "w") as f:
        f.create_dataset("images", data=images)
        f.create_dataset("depths", data=depths)
    return images, depths


def test_three_pair_fixture_full_export(tmp_path):
    archive = tmp_path / "fix.mat"
    images, depths = write_fixture(archive)
    out = tmp_path / "out"
    manifest = convert(IngestConfig(archive, out))
    assert manifest == out / "manifest.tsv"
    assert sorted(p.name for p in (out / "rgb").iterdir()) == [
        "n0000.png", "n0001.png", "n0002.png"]
    assert len(list((out / "depth").iterdir())) == 3
    lines = manifest.read_text().splitlines()
    assert lines[0].startswith("#depth_max=")
    assert len(lines) == 4
    # rgb content round-trips exactly (uint8 -> png -> uint8)
    rgb0 = np.asarray(Image.open(out / "rgb" / "n0000.png"))
    assert np.array_equal(rgb0, images[0].transpose(2, 1, 0))


def test_depth_quantization_round_trip(tmp_path):
    archive = tmp_path / "fix.mat"
    _, depths = write_fixture(archive, depth_scale=9.7)
    out = tmp_path / "out"
    manifest = convert(IngestConfig(archive, out))
    depth_max = float(manifest.read_text().splitlines()[0].split("=", 1)[1])
    original_max = float(max(d.max() for d in depths))
    assert depth_max == pytest.approx(original_max, rel=1e-12)
    # read-back max * depth_max / 65535 recovers the original max
    stored_max = max(
        np.asarray(Image.open(p)).max() for p in (out / "depth").iterdir())
    recovered = stored_max * depth_max / 65535.0
    assert abs(recovered - original_max) <= depth_max / 65535.0
    # every stored pixel is within one quantization step
    for i in range(3):
        stored = np.asarray(Image.open(out / "depth" / f"n{i:04d}.png"))
        assert np.max(np.abs(stored / 65535.0 * depth_max - depths[i].T)) \
            <= depth_max / 65535.0


def test_limit(tmp_path):
    archive = tmp_path / "fix.mat"
    write_fixture(archive)
    out = tmp_path / "out"
    manifest = convert(IngestConfig(archive, out, limit=1))
    assert len(manifest.read_text().splitlines()) == 2
    assert len(list((out / "rgb").iterdir())) == 1


def test_refuses_nonempty_output(tmp_path):
    archive = tmp_path / "fix.mat"
    write_fixture(archive)
    out = tmp_path / "out"
    out.mkdir()
    (out / "stale.txt").write_text("x")
    with pytest.raises(IngestError, match="not empty"):
        convert(IngestConfig(archive, out))


def test_missing_dataset_aborts_and_cleans_up(tmp_path):
    archive = tmp_path / "bad.mat"
    with h5py.File(archive, "w") as f:
        f.create_dataset("images", data=np.zeros((2, 3, 8, 8), dtype=np.uint8))
    out = tmp_path / "out"
    with pytest.raises(IngestError, match="depths"):
        convert(IngestConfig(archive, out))
    assert not (out / "manifest.tsv").exists()


def test_count_mismatch_rejected(tmp_path):
    archive = tmp_path / "bad.mat"
    with h5py.File(archive, "w") as f:
        f.create_dataset("images", data=np.zeros((2, 3, 96, 64), dtype=np.uint8))
        f.create_dataset("depths", data=np.ones((3, 96, 64)))
    with pytest.raises(IngestError, match="2 images vs 3 depths"):
        convert(IngestConfig(archive, tmp_path / "out"))


def test_partial_output_removed_on_bad_depth(tmp_path):
    archive = tmp_path / "bad.mat"
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, size=(2, 3, 96, 64), dtype=np.uint8)
    depths = np.ones((2, 96, 64))
    depths[1, 0, 0] = np.nan
    with h5py.File(archive, "w") as f:
        f.create_dataset("images", data=images)
        f.create_dataset("depths", data=depths)
    out = tmp_path / "out"
    with pytest.raises(IngestError, match="bad depth"):
        convert(IngestConfig(archive, out))
    assert not (out / "manifest.tsv").exists()
    assert not (out / "rgb").exists()


def test_idempotent_byte_identical(tmp_path):
    archive = tmp_path / "fix.mat"
    write_fixture(archive, seed=4)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    convert(IngestConfig(archive, out_a))
    convert(IngestConfig(archive, out_b))
    for rel in ("manifest.tsv", "rgb/n0001.png", "depth/n0002.png"):
        assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes()


def test_resize_halves_dimensions(tmp_path):
    archive = tmp_path / "fix.mat"
    write_fixture(archive)
    out = tmp_path / "out"
    convert(IngestConfig(archive, out, resize=True))
    rgb = np.asarray(Image.open(out / "rgb" / "n0000.png"))
    assert rgb.shape == (48, 64, 3)
    depth = np.asarray(Image.open(out / "depth" / "n0000.png"))
    assert depth.shape == (48, 64)


def test_missing_archive(tmp_path):
    with pytest.raises(IngestError, match="not found"):
        convert(IngestConfig(tmp_path / "nope.mat", tmp_path / "out"))


def test_output_passes_primary_dataset_check(tmp_path):
    """The exported layout is validated through the lab's own CLI, the
    only interface shared between the two packages."""
    archive = tmp_path / "fix.mat"
    write_fixture(archive)
    out = tmp_path / "out"
    convert(IngestConfig(archive, out))
    proc = subprocess.run(
        [sys.executable, "-m", "dil.cli", "dataset-check", "--data", str(out)],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "dataset ok (3 samples)" in proc.stdout


def test_cli_entry_point(tmp_path):
    archive = tmp_path / "fix.mat"
    write_fixture(archive)
    out = tmp_path / "out"
    proc = subprocess.run(
        [sys.executable, "-m", "nyu_ingest.convert", str(archive), str(out),
         "--limit", "2"],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "manifest.tsv" in proc.stdout
    assert len(list((out / "rgb").iterdir())) == 2
