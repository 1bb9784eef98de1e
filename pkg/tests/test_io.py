import json
import struct

import numpy as np
import pytest
from PIL import Image

from rayblend.io import (CameraFormatError, DescriptorFormatError, ImageFormatError,
                         ManifestError, PlyHeaderError, PlyLayoutError, PlyTruncatedError,
                         SceneIOError, compose_scenes, load_cameras, load_descriptors,
                         load_image, load_manifest, load_point_cloud, load_scene, save_cameras,
                         save_descriptors, save_image, save_point_cloud, save_scene)
from rayblend.scene import Camera, DescriptorSet, PointCloud, Scene


def _rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


class TestPly:
    def test_single_ascii_vertex(self, tmp_path):
        p = tmp_path / "a.ply"
        p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n"
                     "property float y\nproperty float z\nend_header\n0 0 0\n")
        np.testing.assert_array_equal(load_point_cloud(p).positions, [[0, 0, 0]])

    def test_extra_properties_ignored(self, tmp_path):
        p = tmp_path / "c.ply"
        p.write_text("ply\nformat ascii 1.0\ncomment scanner output\nelement vertex 2\n"
                     "property float nx\nproperty float x\nproperty float y\nproperty float z\n"
                     "property uchar red\nproperty uchar green\nproperty uchar blue\n"
                     "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
                     "9 1 2 3 255 0 0\n9 4 5 6 0 255 0\n3 0 1 1\n")
        np.testing.assert_array_equal(load_point_cloud(p).positions, [[1, 2, 3], [4, 5, 6]])

    def test_element_before_vertices(self, tmp_path):
        p = tmp_path / "f.ply"
        body = struct.pack("<B3i", 3, 0, 1, 2) + struct.pack("<3f", 1.5, 2.5, 3.5)
        header = ("ply\nformat binary_little_endian 1.0\nelement face 1\n"
                  "property list uchar int vertex_indices\nelement vertex 1\n"
                  "property float x\nproperty float y\nproperty float z\nend_header\n")
        p.write_bytes(header.encode() + body)
        np.testing.assert_array_equal(load_point_cloud(p).positions, [[1.5, 2.5, 3.5]])

    @pytest.mark.parametrize("binary", [False, True])
    def test_round_trip(self, tmp_path, binary):
        pts = np.random.default_rng(0).normal(size=(50, 3))
        cols = np.random.default_rng(1).integers(0, 255, size=(50, 3))
        p = tmp_path / "r.ply"
        save_point_cloud(PointCloud(pts), p, binary=binary, colors=cols)
        np.testing.assert_array_equal(load_point_cloud(p).positions, pts)

    def test_truncated_ascii(self, tmp_path):
        p = tmp_path / "t.ply"
        rows = "".join(f"{k} 0 0\n" for k in range(9))
        p.write_text("ply\nformat ascii 1.0\nelement vertex 10\nproperty float x\n"
                     f"property float y\nproperty float z\nend_header\n{rows}")
        with pytest.raises(PlyTruncatedError):
            load_point_cloud(p)

    def test_truncated_binary(self, tmp_path):
        p = tmp_path / "t.ply"
        save_point_cloud(PointCloud(np.zeros((10, 3))), p, binary=True)
        p.write_bytes(p.read_bytes()[:-24])
        with pytest.raises(PlyTruncatedError):
            load_point_cloud(p)

    @pytest.mark.parametrize("text", [
        "plx\nformat ascii 1.0\nend_header\n",
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n",
        "ply\nformat ascii 1.0\nelement vertex one\nend_header\n",
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty quad x\nend_header\n",
    ])
    def test_header_errors(self, tmp_path, text):
        p = tmp_path / "h.ply"
        p.write_text(text)
        with pytest.raises(PlyHeaderError):
            load_point_cloud(p)

    @pytest.mark.parametrize("text", [
        "ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float x\n"
        "property float y\nproperty float z\nend_header\n",
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
        "end_header\n0 0\n",
        "ply\nformat ascii 1.0\nelement face 1\nproperty list uchar int v\nend_header\n1 0\n",
    ])
    def test_layout_errors(self, tmp_path, text):
        p = tmp_path / "l.ply"
        p.write_text(text)
        with pytest.raises(PlyLayoutError):
            load_point_cloud(p)

    def test_error_kinds_are_distinct(self):
        kinds = {PlyHeaderError, PlyLayoutError, PlyTruncatedError}
        assert all(issubclass(k, SceneIOError) for k in kinds)
        assert len({k.__name__ for k in kinds}) == 3


class TestCameras:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(2)
        cams = [Camera(np.eye(3), np.zeros(3), (100, 100), (64, 64), (128, 128), "front"),
                Camera(_rotation(rng), rng.normal(size=3), (512.123456789, 511.9),
                       (255.5 + 1e-9, 250.25), (512, 500), "side")]
        p = tmp_path / "cams.txt"
        save_cameras(cams, p)
        back = load_cameras(p)
        assert [c.name for c in back] == ["front", "side"]
        for a, b in zip(cams, back):
            np.testing.assert_array_equal(a.rotation, b.rotation)
            np.testing.assert_array_equal(a.translation, b.translation)
            assert a.focal == b.focal and a.principal == b.principal and a.canvas == b.canvas

    def test_row_count_mismatch(self, tmp_path):
        p = tmp_path / "cams.txt"
        save_cameras([Camera(np.eye(3), np.zeros(3), (1, 1), (0, 0), (4, 4), "a")], p)
        p.write_text(p.read_text().replace("cameras 1", "cameras 2"))
        with pytest.raises(CameraFormatError):
            load_cameras(p)

    def test_bad_rotation_names_view(self, tmp_path):
        p = tmp_path / "cams.txt"
        p.write_text("cameras 1\nbroken 1 1 0 0 4 4 1 0 0 0 0 2 0 0 0 0 1 0\n")
        with pytest.raises(CameraFormatError, match="broken"):
            load_cameras(p)

    def test_wrong_field_count(self, tmp_path):
        p = tmp_path / "cams.txt"
        p.write_text("cameras 1\nv 1 1 0 0 4 4 1 0 0\n")
        with pytest.raises(CameraFormatError):
            load_cameras(p)


class TestDescriptors:
    def test_round_trip_bit_exact(self, tmp_path):
        vals = np.random.default_rng(3).normal(size=(2, 8)).astype(np.float32)
        p = tmp_path / "d.bin"
        save_descriptors(DescriptorSet(vals), p)
        out = load_descriptors(p)
        np.testing.assert_array_equal(out.values, vals)
        save_descriptors(out, tmp_path / "e.bin")
        assert (tmp_path / "e.bin").read_bytes() == p.read_bytes()

    def test_layout(self, tmp_path):
        p = tmp_path / "d.bin"
        save_descriptors(DescriptorSet(np.ones((2, 3))), p)
        data = p.read_bytes()
        assert struct.unpack("<qqq", data[8:32]) == (1, 2, 3)
        assert len(data) == 32 + 6 * 4

    def test_errors(self, tmp_path):
        p = tmp_path / "d.bin"
        save_descriptors(DescriptorSet(np.ones((2, 3))), p)
        good = p.read_bytes()
        cases = [b"XXXXXXXX" + good[8:],
                 good[:8] + struct.pack("<q", 9) + good[16:],
                 good[:-4],
                 good[:16] + struct.pack("<qq", 0, 3)]
        for data in cases:
            p.write_bytes(data)
            with pytest.raises(DescriptorFormatError):
                load_descriptors(p)


class TestImages:
    def test_white_pixel(self, tmp_path):
        p = tmp_path / "w.png"
        save_image(p, np.ones((1, 1, 3)))
        np.testing.assert_array_equal(load_image(p), np.ones((1, 1, 3)))

    def test_rgba_zero_alpha_preserved(self, tmp_path):
        img = np.zeros((2, 3, 4))
        img[..., 0] = 1.0
        img[0, 0, 3] = 1.0
        p = tmp_path / "a.png"
        save_image(p, img)
        np.testing.assert_array_equal(load_image(p), img)

    def test_byte_idempotent(self, tmp_path):
        img = np.random.default_rng(4).random((5, 7, 4))
        p, q = tmp_path / "a.png", tmp_path / "b.png"
        save_image(p, img)
        save_image(q, load_image(p))
        np.testing.assert_array_equal(np.asarray(Image.open(p)), np.asarray(Image.open(q)))

    def test_sixteen_bit_rejected(self, tmp_path):
        p = tmp_path / "deep.png"
        Image.fromarray(np.full((2, 2), 40000, dtype=np.uint16)).save(p)
        with pytest.raises(ImageFormatError):
            load_image(p)


def _scene(n, seed, label):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(n, 8)).astype(np.float32).astype(np.float64)
    return Scene(PointCloud(rng.normal(size=(n, 3))), DescriptorSet(vals), 1.0, label)


def _manifest(tmp_path, entries):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"format": "rayblend-manifest", "scenes": entries}))
    return p


class TestScenes:
    def test_scene_round_trip(self, tmp_path):
        s = _scene(20, 0, "obj")
        s.jitter_exponent = 1.75
        save_scene(s, tmp_path / "s")
        back = load_scene(tmp_path / "s")
        np.testing.assert_array_equal(back.cloud.positions, s.cloud.positions)
        np.testing.assert_array_equal(back.descriptors.values, s.descriptors.values)
        assert back.jitter_exponent == 1.75 and back.label == "obj"

    def test_bare_ply_gets_initialized(self, tmp_path):
        save_point_cloud(PointCloud(np.zeros((4, 3))), tmp_path / "p.ply")
        s = load_scene(tmp_path / "p.ply", dim=6)
        assert s.descriptors.values.shape == (4, 6)

    def test_single_identity_entry_is_identity(self, tmp_path):
        s = _scene(30, 1, "a")
        save_scene(s, tmp_path / "a")
        out = compose_scenes(_manifest(tmp_path, [{"scene": "a"}]))
        np.testing.assert_array_equal(out.cloud.positions, s.cloud.positions)
        np.testing.assert_array_equal(out.descriptors.values, s.descriptors.values)

    def test_two_entries_concatenate(self, tmp_path):
        a, b = _scene(5, 1, "a"), _scene(7, 2, "b")
        save_scene(a, tmp_path / "a")
        save_scene(b, tmp_path / "b")
        shift = np.eye(4)
        shift[:3, 3] = [1, 2, 3]
        out = compose_scenes(_manifest(tmp_path, [{"scene": "a"},
                                                  {"scene": "b", "transform": shift.tolist()}]))
        assert len(out) == 12
        np.testing.assert_array_equal(out.cloud.positions[:5], a.cloud.positions)
        np.testing.assert_allclose(out.cloud.positions[5:], b.cloud.positions + [1, 2, 3])
        np.testing.assert_array_equal(out.descriptors.values[5:], b.descriptors.values)

    def test_alpha_scale(self, tmp_path):
        s = _scene(40, 3, "a")
        vals = s.descriptors.values
        vals[:, -1] = np.abs(vals[:, -1]) + 0.05
        vals[0, -1] = -0.5  # dead point stays dead
        save_scene(s, tmp_path / "a")
        out = compose_scenes(_manifest(tmp_path, [{"scene": "a", "alpha_scale": 0.6}]))
        before = np.maximum(np.tanh(np.float32(vals[:, -1]).astype(float)), 0)
        after = np.maximum(np.tanh(out.descriptors.values[:, -1]), 0)
        np.testing.assert_allclose(after, 0.6 * before, atol=1e-12)
        np.testing.assert_array_equal(out.descriptors.colors, s.descriptors.colors)

    def test_alpha_scale_with_mu(self, tmp_path):
        s = _scene(10, 4, "a")
        s.descriptors.values[:, -1] = 0.4
        save_scene(s, tmp_path / "a")
        out = compose_scenes(_manifest(tmp_path, [{"scene": "a", "alpha_scale": 0.5, "mu": 2}]))
        np.testing.assert_allclose(np.tanh(out.descriptors.raw_alpha),
                                   0.25 * np.tanh(np.float32(0.4)), atol=1e-12)

    def test_cloud_with_descriptors(self, tmp_path):
        s = _scene(6, 5, "a")
        save_point_cloud(s.cloud, tmp_path / "p.ply")
        save_descriptors(s.descriptors, tmp_path / "d.bin")
        out = compose_scenes(_manifest(tmp_path, [{"cloud": "p.ply", "descriptors": "d.bin"}]))
        np.testing.assert_array_equal(out.descriptors.values, s.descriptors.values)

    def test_manifest_errors(self, tmp_path):
        s = _scene(6, 5, "a")
        save_point_cloud(s.cloud, tmp_path / "p.ply")
        save_descriptors(DescriptorSet(np.zeros((5, 8))), tmp_path / "d.bin")
        with pytest.raises(ManifestError):
            compose_scenes(_manifest(tmp_path, [{"cloud": "p.ply", "descriptors": "d.bin"}]))
        with pytest.raises(ManifestError):
            load_manifest(_manifest(tmp_path, [{"cloud": "missing.ply"}]))
        shear = np.eye(4)
        shear[0, 1] = 0.3
        with pytest.raises(ManifestError):
            load_manifest(_manifest(tmp_path, [{"cloud": "p.ply", "transform": shear.tolist()}]))
        scaled = np.eye(4) * 2.0
        scaled[3, 3] = 1.0
        load_manifest(_manifest(tmp_path, [{"cloud": "p.ply", "transform": scaled.tolist()}]))
