"""Depth/PLY/mask ingestion and point-cloud operations.

The sphere tests render an analytic depth image (ray-cast, not splatted) so
unprojection and normal estimation can be checked against closed forms.
"""

import json
import os

import cv2
import numpy as np
import pytest

from ppfpose.geom import CameraIntrinsics, RigidPose
from ppfpose.rgbd import (
    BinaryMask,
    DepthMap,
    PointCloud,
    dilate_mask,
    estimate_normals,
    load_object_model,
    load_ply,
    load_scene,
    max_pairwise_distance,
    save_ply,
    unproject_depth,
    voxel_downsample,
)
from ppfpose.synth import make_box_model, write_models_dir

from conftest import d2_symmetries


def analytic_sphere_depth(K, center, radius, depth_scale=0.1):
    """Exact first-hit depth of a sphere: z(u,v) along each pixel ray."""
    us, vs = np.meshgrid(np.arange(K.width), np.arange(K.height), indexing="xy")
    dx = (us - K.cx) / K.fx
    dy = (vs - K.cy) / K.fy
    # Ray p = t * (dx, dy, 1); solve |p - c|^2 = r^2 for the smaller t.
    a = dx * dx + dy * dy + 1.0
    b = -2.0 * (dx * center[0] + dy * center[1] + center[2])
    c = np.dot(center, center) - radius * radius
    disc = b * b - 4 * a * c
    hit = disc >= 0
    t = np.where(hit, (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * a), 0.0)
    z = np.where(hit & (t > 0), t, 0.0)
    raw = np.clip(np.rint(z * 1000.0 / depth_scale), 0, 65535).astype(np.uint16)
    return DepthMap(raw, depth_scale)


class TestLoadPly:
    def test_hand_written_ascii(self, tmp_path):
        path = tmp_path / "tri.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 3\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n0 0 0\n1000 0 0\n0 1000 0\n")
        cloud = load_ply(path)
        assert len(cloud) == 3
        assert np.allclose(cloud.points[1], [1.0, 0.0, 0.0])
        assert abs(max_pairwise_distance(cloud.points) - np.sqrt(2)) < 1e-9
        assert cloud.normals is None

    def test_binary_round_trip(self, tmp_path, rng):
        pts = rng.uniform(-0.2, 0.2, size=(1000, 3))
        normals = rng.normal(size=(1000, 3))
        normals /= np.linalg.norm(normals, axis=1)[:, None]
        colors = rng.integers(0, 256, size=(1000, 3)).astype(np.uint8)
        path = tmp_path / "cloud.ply"
        save_ply(path, PointCloud(pts, normals, colors))
        back = load_ply(path)
        # Coordinates go through float32 millimeters.
        assert np.abs(back.points - pts).max() < 1e-6
        assert np.abs(back.normals - normals).max() < 1e-6
        assert np.array_equal(back.colors, colors)

    def test_ascii_round_trip(self, tmp_path, rng):
        pts = rng.uniform(-0.1, 0.1, size=(50, 3))
        path = tmp_path / "cloud.ply"
        save_ply(path, PointCloud(pts), ascii_format=True)
        back = load_ply(path)
        assert np.abs(back.points - pts).max() < 1e-6

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_ply(tmp_path / "nothing.ply")

    def test_zero_vertices(self, tmp_path):
        path = tmp_path / "empty.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 0\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n")
        with pytest.raises(ValueError):
            load_ply(path)

    def test_vertex_not_first_rejected(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement face 1\n"
            "property list uchar int vertex_indices\n"
            "element vertex 1\nproperty float x\nproperty float y\n"
            "property float z\nend_header\n3 0 0 0\n0 0 0\n")
        with pytest.raises(ValueError, match="layout"):
            load_ply(path)

    def test_faces_after_vertices_ignored(self, tmp_path):
        path = tmp_path / "mesh.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 3\n"
            "property float x\nproperty float y\nproperty float z\n"
            "element face 1\nproperty list uchar int vertex_indices\n"
            "end_header\n0 0 0\n1000 0 0\n0 1000 0\n3 0 1 2\n")
        assert len(load_ply(path)) == 3


class TestModelsDir:
    def test_round_trip_with_symmetries(self, tmp_path):
        model = make_box_model(7, (0.1, 0.08, 0.06), 0.01,
                               symmetries=d2_symmetries())
        write_models_dir(tmp_path, [model])
        back = load_object_model(tmp_path, 7)
        assert back.object_id == 7
        assert abs(back.diameter - model.diameter) < 1e-9
        assert len(back.symmetries) == 4
        assert np.abs(back.cloud.points - model.cloud.points).max() < 1e-6

    def test_missing_model_file(self, tmp_path):
        write_models_dir(tmp_path, [make_box_model(1, (0.1, 0.1, 0.1), 0.02)])
        with pytest.raises(FileNotFoundError):
            load_object_model(tmp_path, 99)


class TestLoadScene:
    def _write_scene(self, root, raw, depth_scale=0.1):
        os.makedirs(root / "depth")
        cam = {"0": {"cam_K": [572.4, 0, 325.3, 0, 573.6, 242.0, 0, 0, 1],
                     "depth_scale": depth_scale}}
        (root / "scene_camera.json").write_text(json.dumps(cam))
        cv2.imwrite(str(root / "depth" / "000000.png"), raw)

    def test_intrinsics_fields(self, tmp_path):
        raw = np.zeros((480, 640), dtype=np.uint16)
        self._write_scene(tmp_path, raw)
        depth, color, K = load_scene(tmp_path, 0)
        assert K.fx == 572.4 and K.cx == 325.3 and K.fy == 573.6 and K.cy == 242.0
        assert color is None
        assert depth.raw.shape == (480, 640)

    def test_depth_scale_to_meters(self, tmp_path):
        raw = np.full((480, 640), 10000, dtype=np.uint16)
        self._write_scene(tmp_path, raw, depth_scale=0.1)
        depth, _, K = load_scene(tmp_path, 0)
        cloud = unproject_depth(depth, K)
        assert np.allclose(cloud.points[:, 2], 1.0)

    def test_missing_image_id(self, tmp_path):
        self._write_scene(tmp_path, np.zeros((10, 10), dtype=np.uint16))
        with pytest.raises(KeyError):
            load_scene(tmp_path, 5)


class TestUnproject:
    def test_principal_point(self):
        K = CameraIntrinsics(500.0, 500.0, 4.0, 3.0, 9, 7)
        raw = np.zeros((7, 9), dtype=np.uint16)
        raw[3, 4] = 10000                      # 1 m at scale 0.1
        cloud = unproject_depth(DepthMap(raw, 0.1), K)
        assert len(cloud) == 1
        assert np.allclose(cloud.points[0], [0.0, 0.0, 1.0])

    def test_all_zero_depth(self):
        K = CameraIntrinsics(500.0, 500.0, 4.0, 3.0, 9, 7)
        cloud = unproject_depth(DepthMap(np.zeros((7, 9), dtype=np.uint16), 0.1), K)
        assert len(cloud) == 0

    def test_mask_restricts(self, small_camera):
        raw = np.full((240, 320), 8000, dtype=np.uint16)
        bits = np.zeros((240, 320), dtype=bool)
        bits[100:110, 50:60] = True
        cloud = unproject_depth(DepthMap(raw, 0.1), small_camera, BinaryMask(bits))
        assert len(cloud) == 100

    def test_sphere_round_trip(self, small_camera):
        center = np.array([0.02, -0.03, 0.7])
        depth = analytic_sphere_depth(small_camera, center, 0.08)
        cloud = unproject_depth(depth, small_camera)
        assert len(cloud) > 500
        residual = np.abs(np.linalg.norm(cloud.points - center, axis=1) - 0.08)
        # Tolerance: half a quantization step along the ray plus slack.
        assert np.percentile(residual, 99) < 0.5 * 0.1e-3 * 2.5 + 1e-6

    def test_reprojection_identity(self, small_camera, rng):
        raw = (rng.uniform(4000, 9000, size=(240, 320))).astype(np.uint16)
        depth = DepthMap(raw, 0.1)
        cloud = unproject_depth(depth, small_camera)
        uv = small_camera.project(cloud.points)
        expected = np.stack([cloud.pixels[:, 1], cloud.pixels[:, 0]], axis=1)
        assert np.abs(uv - expected).max() < 1e-6


class TestEstimateNormals:
    def test_constant_depth_plane(self, small_camera):
        raw = np.full((240, 320), 7000, dtype=np.uint16)
        depth = DepthMap(raw, 0.1)
        cloud = estimate_normals(depth, small_camera, unproject_depth(depth, small_camera))
        assert len(cloud) == 240 * 320
        assert np.abs(cloud.normals - [0.0, 0.0, -1.0]).max() < 1e-3

    def test_sphere_normals_radial(self, small_camera):
        center = np.array([0.0, 0.0, 0.7])
        depth = analytic_sphere_depth(small_camera, center, 0.08)
        cloud = unproject_depth(depth, small_camera)
        oriented = estimate_normals(depth, small_camera, cloud)
        # Interior points only: facing the camera reasonably head-on.
        radial = (oriented.points - center) / 0.08
        interior = radial[:, 2] < -0.5
        cos = np.abs(np.sum(oriented.normals[interior] * radial[interior], axis=1))
        frac = np.mean(cos > np.cos(np.deg2rad(3.0)))
        assert frac >= 0.99

    def test_isolated_pixel_dropped(self, small_camera):
        raw = np.zeros((240, 320), dtype=np.uint16)
        raw[100, 100] = 7000
        depth = DepthMap(raw, 0.1)
        cloud = estimate_normals(depth, small_camera, unproject_depth(depth, small_camera))
        assert len(cloud) == 0

    def test_unit_norm_and_camera_facing(self, small_camera):
        center = np.array([0.03, 0.01, 0.6])
        depth = analytic_sphere_depth(small_camera, center, 0.1)
        cloud = estimate_normals(depth, small_camera,
                                 unproject_depth(depth, small_camera))
        assert np.abs(np.linalg.norm(cloud.normals, axis=1) - 1.0).max() < 1e-9
        assert np.all(np.sum(cloud.normals * cloud.points, axis=1) < 0)

    def test_discontinuity_not_smeared(self, small_camera):
        # Two fronto-parallel planes at different depths; normals near the
        # step must stay (0,0,-1) instead of tilting across the gap.
        raw = np.full((240, 320), 6000, dtype=np.uint16)
        raw[:, 160:] = 9000
        depth = DepthMap(raw, 0.1)
        cloud = estimate_normals(depth, small_camera,
                                 unproject_depth(depth, small_camera))
        assert np.abs(cloud.normals - [0.0, 0.0, -1.0]).max() < 1e-3


class TestVoxelDownsample:
    def test_single_voxel_centroid(self, rng):
        pts = rng.uniform(0.0, 0.009, size=(50, 3))
        out = voxel_downsample(PointCloud(pts), 0.01)
        assert len(out) == 1
        assert np.allclose(out.points[0], pts.mean(axis=0))

    def test_separated_grid_unchanged(self):
        g = np.arange(5) * 0.02
        pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3) + 0.005
        out = voxel_downsample(PointCloud(pts), 0.01)
        assert len(out) == len(pts)

    def test_output_near_input(self, rng):
        pts = rng.uniform(-0.3, 0.3, size=(2000, 3))
        step = 0.05
        out = voxel_downsample(PointCloud(pts), step)
        assert len(out) <= len(pts)
        from scipy.spatial import cKDTree
        d, _ = cKDTree(pts).query(out.points)
        assert d.max() <= np.sqrt(3) / 2 * step + 1e-12

    def test_normals_renormalized(self, rng):
        pts = rng.uniform(0, 0.009, size=(20, 3))
        normals = np.tile([0.0, 0.0, -1.0], (20, 1))
        out = voxel_downsample(PointCloud(pts, normals), 0.01)
        assert np.abs(np.linalg.norm(out.normals, axis=1) - 1.0).max() < 1e-12

    def test_deterministic(self, rng):
        pts = rng.uniform(-0.1, 0.1, size=(500, 3))
        a = voxel_downsample(PointCloud(pts), 0.02)
        b = voxel_downsample(PointCloud(pts), 0.02)
        assert np.array_equal(a.points, b.points)

    def test_bad_step(self):
        with pytest.raises(ValueError):
            voxel_downsample(PointCloud(np.zeros((1, 3))), 0.0)


class TestDilateMask:
    def test_radius_zero_identity(self, rng):
        bits = rng.random((30, 40)) > 0.8
        out = dilate_mask(BinaryMask(bits), 0)
        assert np.array_equal(out.bits, bits)

    def test_single_pixel_disk(self):
        bits = np.zeros((21, 21), dtype=bool)
        bits[10, 10] = True
        out = dilate_mask(BinaryMask(bits), 2)
        # Oracle: enumerate integer offsets within the disk.
        expected = sum(1 for dy in range(-2, 3) for dx in range(-2, 3)
                       if dx * dx + dy * dy <= 4)
        assert expected == 13
        assert out.count() == expected

    def test_monotone(self, rng):
        bits = rng.random((30, 40)) > 0.9
        out = dilate_mask(BinaryMask(bits), 3)
        assert np.all(out.bits[bits])

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            dilate_mask(BinaryMask(np.zeros((2, 2), dtype=bool)), -1)


class TestDiameter:
    def test_matches_brute_force(self, rng):
        pts = rng.normal(size=(200, 3))
        brute = max(np.linalg.norm(a - b) for a in pts for b in pts)
        assert abs(max_pairwise_distance(pts) - brute) < 1e-12
