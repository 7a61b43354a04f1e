import json

import numpy as np
import pytest

from cgsplat import io
from cgsplat.scene import Camera, GaussianCloud, SegmentMask

from conftest import random_cloud


def random_manifest(rng, n_views=4):
    views = []
    for i in range(n_views):
        eye = rng.normal(size=3) * 3 + [0, 0, 4]
        cam = Camera.look_at(eye, rng.normal(size=3) * 0.2, width=int(rng.integers(16, 40)),
                             height=int(rng.integers(16, 40)), fov_deg=float(rng.uniform(30, 70)))
        views.append(io.ViewRecord(cam, "test" if i % 2 else "train", f"images/{i:03d}.ppm",
                                   f"masks/{i:03d}.pgm", f"gt/{i:03d}.pgm" if rng.random() < 0.7 else None))
    return io.Manifest("random", int(rng.integers(1, 20)), views, "scene.ply", {"seed": int(rng.integers(1000))})


def save_twice(tmp_path, save, load, obj, suffix):
    """Bytes of a first save and of a save after loading it back."""
    a, b = tmp_path / f"a{suffix}", tmp_path / f"b{suffix}"
    save(a, obj)
    save(b, load(a))
    return a.read_bytes(), b.read_bytes()


def roundtrips(tmp_path, seed):
    """save -> load -> save for each format on one random instance; yields (name, first, second)."""
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, n=int(rng.integers(0, 50)), d=int(rng.integers(1, 20)))
    yield ("cloud",) + save_twice(tmp_path, io.save_cloud, io.load_cloud, cloud, ".ply")
    h, w = rng.integers(1, 40, 2)
    mask = SegmentMask(rng.integers(0, 65536, (h, w)))
    yield ("mask",) + save_twice(tmp_path, io.save_mask, io.load_mask, mask, ".pgm")
    fmap = rng.normal(size=(h, w, int(rng.integers(1, 17))))
    yield ("feature map",) + save_twice(tmp_path, io.save_feature_map, io.load_feature_map, fmap, ".cgcf")
    m = random_manifest(rng)
    load = lambda p: io.load_manifest(p, check_files=False)
    yield ("manifest",) + save_twice(tmp_path, io.save_manifest, load, m, ".json")


@pytest.mark.parametrize("seed", range(3))
def test_roundtrips_are_byte_stable(tmp_path, seed):
    for name, first, second in roundtrips(tmp_path, seed):
        assert first == second, name


def test_cloud_roundtrip_values(tmp_path):
    cloud = random_cloud(np.random.default_rng(0), n=10, d=5)
    ids = np.arange(10) % 3
    io.save_cloud(tmp_path / "c.ply", cloud, ids)
    back, extras = io.load_cloud_with_extras(tmp_path / "c.ply")
    np.testing.assert_array_equal(extras["instance"], ids)
    np.testing.assert_allclose(back.positions, cloud.positions, rtol=1e-6)
    np.testing.assert_allclose(back.background, cloud.background, rtol=1e-6)
    head = (tmp_path / "c.ply").read_bytes()[:2000]
    assert b"format binary_little_endian 1.0" in head and b"property float f_seg_4" in head


def test_mask_and_image_layout(tmp_path):
    labels = np.array([[0, 1, 65535]])
    io.save_mask(tmp_path / "m.pgm", SegmentMask(labels))
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5") and raw.endswith(b"\x00\x00\x00\x01\xff\xff")
    np.testing.assert_array_equal(io.load_mask(tmp_path / "m.pgm").labels, labels)
    img = np.random.default_rng(0).uniform(size=(3, 5, 3))
    io.save_image(tmp_path / "i.ppm", img)
    np.testing.assert_allclose(io.load_image(tmp_path / "i.ppm"), img, atol=0.5 / 255 + 1e-12)


def test_feature_map_header(tmp_path):
    io.save_feature_map(tmp_path / "f.cgcf", np.zeros((2, 3, 4)))
    raw = (tmp_path / "f.cgcf").read_bytes()
    assert raw[:16] == b"CGCF" + (2).to_bytes(4, "little") + (3).to_bytes(4, "little") + (4).to_bytes(4, "little")
    assert len(raw) == 16 + 4 * 24


def test_bad_files_raise_format_error(tmp_path):
    (tmp_path / "x.ply").write_bytes(b"not a ply")
    (tmp_path / "x.cgcf").write_bytes(b"CGCF\x01\x00")
    with pytest.raises(io.FormatError):
        io.load_cloud(tmp_path / "x.ply")
    with pytest.raises(io.FormatError):
        io.load_feature_map(tmp_path / "x.cgcf")


def test_manifest_checks(tmp_path):
    m = random_manifest(np.random.default_rng(1))
    io.save_manifest(tmp_path / "manifest.json", m)
    with pytest.raises(FileNotFoundError):
        io.load_manifest(tmp_path / "manifest.json")
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["version"] = 2
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(io.FormatError):
        io.load_manifest(tmp_path / "manifest.json", check_files=False)
    m.views = [v for v in m.views if v.split == "train"]
    io.save_manifest(tmp_path / "manifest.json", m)
    with pytest.raises(io.FormatError, match="test"):
        io.load_manifest(tmp_path / "manifest.json", check_files=False)


def test_empty_cloud_roundtrip(tmp_path):
    io.save_cloud(tmp_path / "e.ply", GaussianCloud.empty(feature_dim=3))
    assert len(io.load_cloud(tmp_path / "e.ply")) == 0
