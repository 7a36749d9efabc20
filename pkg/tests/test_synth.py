"""Synthetic scene factory and cut-paste compositor."""

import json
import os

import numpy as np
import pytest

from ppfpose.geom import CameraIntrinsics, RigidPose
from ppfpose.rgbd import (
    BinaryMask,
    ColorImage,
    estimate_normals,
    load_scene,
    load_scene_gt,
    unproject_depth,
)
from ppfpose.synth import (
    ComposeParams,
    SceneSpec,
    build_training_set,
    compose_training_image,
    generate_scene,
    make_box_model,
    make_cylinder_model,
    make_plane_model,
    make_sphere_model,
    paste_crop,
    write_bop_scene_sequence,
)

from conftest import d2_symmetries


@pytest.fixture
def dense_camera():
    return CameraIntrinsics(1066.0, 1066.0, 159.5, 119.5, 320, 240)


def demo_models():
    return [make_box_model(1, (0.1, 0.07, 0.04), 0.003, symmetries=d2_symmetries()),
            make_cylinder_model(2, 0.03, 0.09, 0.003, symmetry_steps=12)]


class TestShapeFactories:
    def test_box_counts_and_normals(self):
        box = make_box_model(1, (0.1, 0.08, 0.05), 0.01)
        assert len(box.cloud) > 100
        assert np.abs(np.linalg.norm(box.cloud.normals, axis=1) - 1.0).max() < 1e-12
        assert abs(box.diameter - np.linalg.norm([0.1, 0.08, 0.05])) < 1e-12

    def test_sphere_radial_normals(self):
        sphere = make_sphere_model(1, 0.05, 0.004)
        radial = sphere.cloud.points / 0.05
        assert np.abs(sphere.cloud.normals - radial).max() < 1e-9

    def test_cylinder_symmetries_closed(self):
        cyl = make_cylinder_model(1, 0.03, 0.08, 0.004, symmetry_steps=6)
        assert len(cyl.symmetries) == 6

    def test_plane_faces_camera(self):
        plane = make_plane_model(1, 0.2, 0.2, 0.01)
        assert np.all(plane.cloud.normals[:, 2] == -1.0)


class TestGenerateScene:
    def test_deterministic_bit_identical(self, dense_camera):
        spec = SceneSpec(demo_models(), 2, dense_camera, depth_noise=0.002, seed=42)
        a = generate_scene(spec)
        b = generate_scene(spec)
        assert np.array_equal(a.depth.raw, b.depth.raw)
        assert np.array_equal(a.color.pixels, b.color.pixels)
        for ia, ib in zip(a.instances, b.instances):
            assert np.array_equal(ia.mask.bits, ib.mask.bits)
            assert np.array_equal(ia.pose.q, ib.pose.q)
            assert ia.visibility == ib.visibility

    def test_masks_pairwise_disjoint(self, dense_camera):
        spec = SceneSpec(demo_models(), 3, dense_camera, depth_noise=0.0,
                         seed=7, z_range=(0.5, 0.9))
        scene = generate_scene(spec)
        total = np.zeros((dense_camera.height, dense_camera.width), dtype=int)
        for inst in scene.instances:
            total += inst.mask.bits
        assert total.max() <= 1

    def test_render_unproject_consistency(self, dense_camera):
        # Noiseless: every unprojected masked pixel lies within 1 mm of the
        # posed model surface samples (splat radius stays at 1 px here).
        model = make_box_model(1, (0.09, 0.06, 0.03), 0.0006)
        spec = SceneSpec([model], 1, dense_camera, depth_noise=0.0,
                         seed=3, z_range=(0.55, 0.65))
        scene = generate_scene(spec)
        inst = scene.instances[0]
        cloud = unproject_depth(scene.depth, dense_camera, inst.mask)
        assert len(cloud) > 300
        surface = inst.pose.apply(model.cloud.points)
        from scipy.spatial import cKDTree
        d, _ = cKDTree(surface).query(cloud.points)
        assert d.max() < 1e-3

    def test_single_object_fully_visible(self, dense_camera):
        spec = SceneSpec([demo_models()[0]], 1, dense_camera, seed=5,
                         z_range=(0.5, 0.8))
        scene = generate_scene(spec)
        assert scene.instances[0].visibility == 1.0

    def test_clutter_occludes_but_has_no_gt(self, dense_camera):
        # A plane in front of everything wipes out visibility but GT then
        # only lists the real objects.
        plane = make_plane_model(99, 0.6, 0.6, 0.004)
        clutter = [(plane, RigidPose(np.array([1.0, 0, 0, 0]),
                                     np.array([0.0, 0.0, 0.4])))]
        spec = SceneSpec([demo_models()[0]], 1, dense_camera, seed=5,
                         z_range=(0.5, 0.8), clutter=clutter)
        scene = generate_scene(spec)
        assert len(scene.instances) == 1
        assert scene.instances[0].visibility == 0.0

    def test_infeasible_placement_raises(self, dense_camera):
        big = make_box_model(1, (1.0, 1.0, 1.0), 0.05)
        spec = SceneSpec([big], 1, dense_camera, seed=0, z_range=(0.5, 0.6))
        with pytest.raises(RuntimeError):
            generate_scene(spec)

    def test_noise_changes_depth_only_statistically(self, dense_camera):
        models = demo_models()
        clean = generate_scene(SceneSpec(models, 1, dense_camera, 0.0, seed=11))
        noisy = generate_scene(SceneSpec(models, 1, dense_camera, 0.002, seed=11))
        mask = clean.instances[0].mask.bits
        dz = (noisy.depth.meters() - clean.depth.meters())[mask]
        assert 0.001 < dz.std() < 0.003
        assert abs(dz.mean()) < 3.0 * 0.002 / np.sqrt(max(dz.size, 1)) + 1e-5


class TestBopWriting:
    def test_scene_round_trip(self, tmp_path, dense_camera):
        spec = SceneSpec(demo_models(), 2, dense_camera, depth_noise=0.001, seed=9)
        scenes = {0: generate_scene(spec),
                  1: generate_scene(SceneSpec(demo_models(), 1, dense_camera,
                                              0.001, seed=10))}
        scene_dir = write_bop_scene_sequence(tmp_path, scenes, scene_id=0)
        depth, color, K = load_scene(scene_dir, 0)
        assert np.array_equal(depth.raw, scenes[0].depth.raw)
        assert np.array_equal(color.pixels, scenes[0].color.pixels)
        assert abs(K.fx - dense_camera.fx) < 1e-9
        gt = load_scene_gt(scene_dir)
        assert set(gt.keys()) == {0, 1}
        for (obj_id, pose), inst in zip(gt[0], scenes[0].instances):
            assert obj_id == inst.object_id
            assert np.abs(pose.t - inst.pose.t).max() < 1e-9
        dets = json.load(open(os.path.join(scene_dir, "detections.json")))
        assert all(os.path.exists(os.path.join(scene_dir, d["mask_path"]))
                   for d in dets)


def checker_crop(w=12, h=10, alpha_all=True):
    rgba = np.zeros((h, w, 4), dtype=np.uint8)
    rgba[:, :, 0] = 255 * ((np.add.outer(np.arange(h), np.arange(w)) % 2))
    rgba[:, :, 1] = 120
    rgba[:, :, 3] = 255
    if not alpha_all:
        rgba[:3, :3, 3] = 0
    return rgba


class TestPasteCrop:
    def test_identity_paste_mask_equals_footprint(self):
        crop = checker_crop(alpha_all=False)
        canvas = np.zeros((30, 40, 3))
        labels = np.full((30, 40), -1, dtype=np.int32)
        ok = paste_crop(canvas, labels, crop, 0, 1.0, 0.0, (5, 7))
        assert ok
        footprint = crop[:, :, 3] > 0
        assert np.array_equal(labels[7:17, 5:17] == 0, footprint)

    def test_too_large_after_scaling_skipped(self):
        crop = checker_crop(20, 20)
        canvas = np.zeros((30, 30, 3))
        labels = np.full((30, 30), -1, dtype=np.int32)
        assert not paste_crop(canvas, labels, crop, 0, 2.0, 0.0, (0, 0))


class TestComposeTrainingImage:
    def test_annotation_count_bounded(self, rng):
        crops = [(checker_crop(), 1), (checker_crop(8, 8), 2)]
        bg = ColorImage(np.full((60, 80, 3), 30, dtype=np.uint8))
        params = ComposeParams(max_objects=20)
        for _ in range(10):
            _, anns = compose_training_image(crops, bg, params, rng)
            assert 0 <= len(anns) <= 20

    def test_full_overlap_drops_hidden_paste(self):
        # Force two identical pastes at the same spot: the first one's
        # visible mask is empty and its annotation disappears.
        crop = checker_crop()
        canvas = np.full((30, 40, 3), 10.0)
        labels = np.full((30, 40), -1, dtype=np.int32)
        assert paste_crop(canvas, labels, crop, 0, 1.0, 0.0, (5, 7))
        assert paste_crop(canvas, labels, crop, 1, 1.0, 0.0, (5, 7))
        assert not np.any(labels == 0)
        assert np.count_nonzero(labels == 1) == 12 * 10

    def test_annotations_disjoint(self, rng):
        crops = [(checker_crop(), 1)]
        bg = ColorImage(np.full((40, 50, 3), 30, dtype=np.uint8))
        img, anns = compose_training_image(crops, bg, ComposeParams(), rng)
        total = np.zeros((40, 50), dtype=int)
        for a in anns:
            total += a.mask.bits
        assert total.max() <= 1

    def test_deterministic_for_same_rng_state(self):
        crops = [(checker_crop(), 1)]
        bg = ColorImage(np.full((40, 50, 3), 30, dtype=np.uint8))
        img1, _ = compose_training_image(crops, bg, ComposeParams(),
                                         np.random.default_rng(3))
        img2, _ = compose_training_image(crops, bg, ComposeParams(),
                                         np.random.default_rng(3))
        assert np.array_equal(img1.pixels, img2.pixels)


class TestBuildTrainingSet:
    def test_split_ten_images(self, tmp_path):
        crops = [(checker_crop(), 1)]
        bgs = [ColorImage(np.full((40, 50, 3), 25, dtype=np.uint8))]
        summary = build_training_set(crops, bgs, tmp_path, n_images=10,
                                     val_fraction=0.1, augment_fraction=0.0,
                                     seed=5)
        assert summary["n_val"] == 1 and summary["n_train"] == 9
        assert len(os.listdir(tmp_path / "images")) == 10
        val = json.load(open(tmp_path / "val.json"))
        train = json.load(open(tmp_path / "train.json"))
        assert all(e["im_id"] == 0 for e in val)
        assert all(e["im_id"] >= 1 for e in train)

    def test_flip_is_involution_on_masks(self, tmp_path):
        # Flip augmentation: flipping the written mask back must equal the
        # unaugmented mask for the same seed stream.
        import cv2
        crops = [(checker_crop(), 1)]
        bgs = [ColorImage(np.full((40, 50, 3), 25, dtype=np.uint8))]
        out_plain = tmp_path / "plain"
        out_flip = tmp_path / "flip"
        build_training_set(crops, bgs, out_plain, n_images=10, val_fraction=0.1,
                           augment_fraction=0.0, seed=77)
        build_training_set(crops, bgs, out_flip, n_images=10, val_fraction=0.1,
                           augment_fraction=1.0, seed=77)
        flipped_any = False
        for name in sorted(os.listdir(out_plain / "masks")):
            a = cv2.imread(str(out_plain / "masks" / name), 0) > 0
            b = cv2.imread(str(out_flip / "masks" / name), 0) > 0
            assert np.array_equal(a, b) or np.array_equal(a, b[:, ::-1])
            if not np.array_equal(a, b):
                flipped_any = True
        assert flipped_any

    def test_zero_augment_matches_compositor(self, tmp_path):
        import cv2
        crops = [(checker_crop(), 1)]
        bgs = [ColorImage(np.full((40, 50, 3), 25, dtype=np.uint8))]
        build_training_set(crops, bgs, tmp_path, n_images=3, val_fraction=0.34,
                           augment_fraction=0.0, seed=21)
        streams = np.random.SeedSequence(21).spawn(3)
        for i in range(3):
            rng = np.random.default_rng(streams[i])
            rng.integers(1)        # background draw
            img, _ = compose_training_image(crops, bgs[0], ComposeParams(), rng)
            disk = cv2.imread(str(tmp_path / "images" / f"{i:06d}.png"))
            disk = cv2.cvtColor(disk, cv2.COLOR_BGR2RGB)
            assert np.array_equal(disk, img.pixels)

    def test_empty_inputs_raise(self, tmp_path):
        with pytest.raises(ValueError):
            build_training_set([], [ColorImage(np.zeros((5, 5, 3), dtype=np.uint8))],
                               tmp_path, n_images=1)
