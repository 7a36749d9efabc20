"""Pair features, quantization, local frames and the hashed model table."""

import numpy as np
import pytest

from ppfpose.geom import RigidPose
from ppfpose.ppf_model import (
    build_model,
    canonical_rotation,
    compute_ppf,
    compute_ppf_batch,
    load_model,
    local_alpha,
    quantize_ppf,
    save_model,
)
from ppfpose.rgbd import ObjectModel, PointCloud
from ppfpose.synth import make_box_model

from conftest import random_pose


def brute_force_bins(feature, dist_step, angle_step, n_angle):
    bd = min(int(np.floor(feature[0] / dist_step)), 0xFFFF)
    ba = [min(int(np.floor(a / angle_step)), n_angle - 1) for a in feature[1:]]
    return (bd, *ba)


class TestComputePPF:
    def test_orthogonal_case(self):
        f = compute_ppf([0, 0, 0], [0, 0, 1], [1, 0, 0], [0, 0, 1])
        assert np.allclose(f, [1.0, np.pi / 2, np.pi / 2, 0.0])

    def test_collinear_case(self):
        f = compute_ppf([0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 1])
        assert np.allclose(f, [2.0, 0.0, 0.0, 0.0])

    def test_coincident_raises(self):
        with pytest.raises(ValueError):
            compute_ppf([1, 2, 3], [0, 0, 1], [1, 2, 3], [0, 1, 0])

    def test_rigid_invariance(self, rng):
        for _ in range(200):
            p1, p2 = rng.normal(size=3), rng.normal(size=3)
            n1 = rng.normal(size=3)
            n1 /= np.linalg.norm(n1)
            n2 = rng.normal(size=3)
            n2 /= np.linalg.norm(n2)
            f0 = compute_ppf(p1, n1, p2, n2)
            T = random_pose(rng)
            f1 = compute_ppf(T.apply(p1), T.apply_rotation(n1),
                             T.apply(p2), T.apply_rotation(n2))
            assert np.abs(f1 - f0).max() < 1e-6

    def test_batch_matches_scalar(self, rng):
        p1 = rng.normal(size=3)
        n1 = rng.normal(size=3)
        n1 /= np.linalg.norm(n1)
        pts = rng.normal(size=(20, 3))
        nrm = rng.normal(size=(20, 3))
        nrm /= np.linalg.norm(nrm, axis=1)[:, None]
        feats, _ = compute_ppf_batch(p1, n1, pts, nrm)
        for i in range(20):
            assert np.abs(feats[i] - compute_ppf(p1, n1, pts[i], nrm[i])).max() < 1e-12


class TestQuantize:
    def test_distance_bin(self):
        key = quantize_ppf([0.12, 0.0, 0.0, 0.0], 0.05, np.pi / 30, 30)
        assert key >> 24 == 2

    def test_pi_clamped_to_top_bin(self):
        key = quantize_ppf([0.0, np.pi, np.pi, np.pi], 0.05, np.pi / 30, 30)
        assert key & 0xFF == 29
        assert (key >> 8) & 0xFF == 29
        assert (key >> 16) & 0xFF == 29

    def test_exhaustive_small_grid(self):
        # Brute-force bin computation over a grid that crosses bin borders.
        dist_step, n_angle = 0.03, 12
        angle_step = np.pi / n_angle
        ds = np.linspace(0.001, 0.2, 23)
        angs = np.linspace(0.0, np.pi, 17)
        for d in ds:
            for a1 in angs[::4]:
                for a2 in angs[::4]:
                    for a3 in angs[::4]:
                        key = quantize_ppf([d, a1, a2, a3], dist_step, angle_step, n_angle)
                        bd, b1, b2, b3 = brute_force_bins([d, a1, a2, a3],
                                                          dist_step, angle_step, n_angle)
                        assert key == (((bd << 8 | b1) << 8 | b2) << 8) | b3

    def test_equal_bins_equal_keys(self):
        k1 = quantize_ppf([0.051, 0.1, 0.2, 0.3], 0.05, np.pi / 30, 30)
        k2 = quantize_ppf([0.099, 0.1, 0.2, 0.3], 0.05, np.pi / 30, 30)
        k3 = quantize_ppf([0.101, 0.1, 0.2, 0.3], 0.05, np.pi / 30, 30)
        assert k1 == k2 and k2 != k3


class TestLocalAlpha:
    def test_already_in_half_plane(self):
        assert abs(local_alpha([0, 0, 0], [1, 0, 0], [0.5, 0.3, 0.0])) < 1e-12

    def test_quarter_turn_case(self):
        # Rx(alpha) must bring the point into {z = 0, y >= 0}.
        alpha = local_alpha([0, 0, 0], [1, 0, 0], [0.5, 0.0, 0.3])
        assert abs(alpha - (-np.pi / 2)) < 1e-12
        q = np.array([0.5, 0.0, 0.3])
        rot = RigidPose.from_axis_angle([1, 0, 0], alpha).apply(q)
        assert abs(rot[2]) < 1e-12 and rot[1] > 0

    def test_half_plane_property_random(self, rng):
        for _ in range(100):
            p_ref = rng.normal(size=3)
            n_ref = rng.normal(size=3)
            n_ref /= np.linalg.norm(n_ref)
            p_other = rng.normal(size=3)
            alpha = local_alpha(p_ref, n_ref, p_other)
            R = canonical_rotation(n_ref)
            q = R @ (p_other - p_ref)
            rot = RigidPose.from_axis_angle([1, 0, 0], alpha).apply(q)
            assert abs(rot[2]) < 1e-9
            assert rot[1] > -1e-9

    def test_rotation_about_normal_shifts_alpha(self, rng):
        # Oracle: rotating p_other about the reference normal by beta
        # changes alpha by -beta (mod 2pi).
        p_ref = np.zeros(3)
        n_ref = rng.normal(size=3)
        n_ref /= np.linalg.norm(n_ref)
        p_other = rng.normal(size=3)
        base = local_alpha(p_ref, n_ref, p_other)
        for beta in np.linspace(-3.0, 3.0, 13):
            rolled = RigidPose.from_axis_angle(n_ref, beta).apply(p_other)
            alpha = local_alpha(p_ref, n_ref, rolled)
            diff = (alpha - (base - beta) + np.pi) % (2 * np.pi) - np.pi
            assert abs(diff) < 1e-9

    def test_on_axis_defined_as_zero(self):
        assert local_alpha([0, 0, 0], [1, 0, 0], [0.7, 0.0, 0.0]) == 0.0

    def test_anti_aligned_normal(self):
        # Canonical frame for n = -x uses the pi-about-y branch.
        alpha = local_alpha([0, 0, 0], [-1, 0, 0], [-0.5, 0.2, 0.0])
        R = canonical_rotation([-1.0, 0.0, 0.0])
        assert np.allclose(R @ [-1, 0, 0], [1, 0, 0])
        assert np.isfinite(alpha)


class TestBuildModel:
    def test_two_point_model(self):
        cloud = PointCloud(np.array([[0.0, 0, 0], [0.2, 0, 0]]),
                           np.array([[0.0, 0, 1], [0.0, 0, 1]]))
        model = ObjectModel(1, cloud, 0.2, [RigidPose.identity()])
        ppf = build_model(model, tau_d=0.5, n_angle=30)
        assert ppf.n_points == 2
        assert ppf.n_entries == 2

    def test_entry_count_exact(self, box_model):
        ppf = build_model(box_model)
        assert ppf.n_entries == ppf.n_points * (ppf.n_points - 1)

    def test_key_multiset_invariance(self, rng):
        # Points spaced > sqrt(3)*step survive downsampling identically in
        # any orientation, so the quantized key multiset must match.
        step = 0.05 * 0.4
        pts = []
        while len(pts) < 40:
            cand = rng.uniform(-0.18, 0.18, size=3)
            if all(np.linalg.norm(cand - p) > np.sqrt(3) * step * 1.05 for p in pts):
                pts.append(cand)
        pts = np.asarray(pts)
        nrm = rng.normal(size=(40, 3))
        nrm /= np.linalg.norm(nrm, axis=1)[:, None]
        model = ObjectModel(1, PointCloud(pts, nrm), 0.4, [RigidPose.identity()])
        ppf_a = build_model(model)
        T = random_pose(rng)
        moved = ObjectModel(1, PointCloud(T.apply(pts), nrm @ T.rotation_matrix().T),
                            0.4, [RigidPose.identity()])
        ppf_b = build_model(moved)
        assert ppf_a.n_points == ppf_b.n_points == 40
        keys_a = np.repeat(ppf_a.keys, np.diff(ppf_a.offsets))
        keys_b = np.repeat(ppf_b.keys, np.diff(ppf_b.offsets))
        assert np.array_equal(np.sort(keys_a), np.sort(keys_b))

    def test_entries_round_trip(self, rng, box_model):
        # Recomputing the feature of a stored pair finds its own entry.
        ppf = build_model(box_model)
        pts, nrm = ppf.cloud.points, ppf.cloud.normals
        for _ in range(50):
            i, j = rng.integers(0, ppf.n_points, 2)
            if i == j:
                continue
            feats, _ = compute_ppf_batch(pts[i], nrm[i], pts[j:j + 1], nrm[j:j + 1])
            key = quantize_ppf(feats, ppf.dist_step, ppf.angle_step, ppf.n_angle)[0]
            starts, lengths = ppf.lookup(np.array([key]))
            entries = ppf.entry_ref[starts[0]:starts[0] + lengths[0]]
            assert i in entries

    def test_requires_normals(self):
        model = ObjectModel(1, PointCloud(np.zeros((10, 3))), 1.0,
                            [RigidPose.identity()])
        with pytest.raises(ValueError):
            build_model(model)

    def test_rejects_bad_params(self, box_model):
        with pytest.raises(ValueError):
            build_model(box_model, tau_d=0.0)
        with pytest.raises(ValueError):
            build_model(box_model, n_angle=2)


class TestSerialization:
    def test_bit_exact_round_trip(self, tmp_path, box_model):
        ppf = build_model(box_model)
        path = tmp_path / "model.ppfm"
        save_model(path, ppf)
        back = load_model(path)
        assert back.object_id == ppf.object_id
        assert back.dist_step == ppf.dist_step
        assert back.angle_step == ppf.angle_step
        assert back.n_angle == ppf.n_angle
        assert back.diameter == ppf.diameter
        assert np.array_equal(back.cloud.points, ppf.cloud.points)
        assert np.array_equal(back.cloud.normals, ppf.cloud.normals)
        assert np.array_equal(back.cloud.colors, ppf.cloud.colors)
        assert np.array_equal(back.keys, ppf.keys)
        assert np.array_equal(back.offsets, ppf.offsets)
        assert np.array_equal(back.entry_ref, ppf.entry_ref)
        # Alphas pass through float32 in the file on both sides.
        assert np.array_equal(back.entry_alpha.astype(np.float32),
                              ppf.entry_alpha.astype(np.float32))

    def test_second_round_trip_identical_bytes(self, tmp_path, box_model):
        ppf = build_model(box_model)
        p1, p2 = tmp_path / "a.ppfm", tmp_path / "b.ppfm"
        save_model(p1, ppf)
        save_model(p2, load_model(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ppfm"
        path.write_bytes(b"NOPE" + b"\x00" * 100)
        with pytest.raises(ValueError):
            load_model(path)
