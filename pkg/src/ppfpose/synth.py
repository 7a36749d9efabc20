"""Synthetic ground truth: RGB-D scenes with exact poses, and cut-paste
training composites.

Scene generation splat-renders procedurally sampled object clouds at
rejection-sampled poses, so the depth image, instance masks, visibility
fractions and poses are all exactly known. Everything is driven by a single
seed and is bit-reproducible. The compositor pastes RGBA crops onto
background images with random similarity transforms and tracks per-paste
visible masks through occlusion.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import cv2
import numpy as np

from .geom import CameraIntrinsics, RigidPose, random_rotation
from .rgbd import (
    BinaryMask,
    ColorImage,
    DepthMap,
    ObjectModel,
    PointCloud,
    estimate_point_spacing,
    max_pairwise_distance,
    save_color_png,
    save_depth_png,
    save_mask,
    save_ply,
)
from .splat import render_splats

SYNTH_DEPTH_SCALE = 0.1      # mm per raw unit, 16-bit range covers 6.5 m
BACKGROUND_GRAY = 52
_PALETTE = np.array([
    [200, 60, 60], [60, 170, 60], [70, 90, 210], [210, 180, 50],
    [170, 60, 180], [60, 190, 190], [230, 130, 40], [140, 140, 140],
], dtype=np.uint8)


# ---------------------------------------------------------------------------
# Procedural object models
# ---------------------------------------------------------------------------

def rotations_about_axis(axis, count):
    """Identity plus count-1 equal rotations about `axis` (a cyclic group)."""
    return [RigidPose.from_axis_angle(axis, 2.0 * np.pi * k / count)
            for k in range(count)]


def _grid(a_max, b_max, step):
    # Exactly centered so sampled shapes are invariant under their own
    # symmetries (metrics rely on that).
    na = max(1, int(np.floor(a_max / step + 1e-9)))
    nb = max(1, int(np.floor(b_max / step + 1e-9)))
    a = (np.arange(na) - (na - 1) / 2.0) * step
    b = (np.arange(nb) - (nb - 1) / 2.0) * step
    aa, bb = np.meshgrid(a, b, indexing="ij")
    return aa.ravel(), bb.ravel()


def make_box_model(object_id, extents, step, face_colors=None, symmetries=None) -> ObjectModel:
    """Axis-aligned box surface sampled at `step`, centered at the origin.

    face_colors: optional six RGB triples in +x,-x,+y,-y,+z,-z order; defaults
    to a palette color for the whole box.
    """
    ex, ey, ez = extents
    if face_colors is None:
        face_colors = [_PALETTE[object_id % len(_PALETTE)]] * 6
    pts, nrm, col = [], [], []
    faces = [
        (0, +1, ey, ez), (0, -1, ey, ez),
        (1, +1, ex, ez), (1, -1, ex, ez),
        (2, +1, ex, ey), (2, -1, ex, ey),
    ]
    for f, (axis, sign, a_max, b_max) in enumerate(faces):
        aa, bb = _grid(a_max, b_max, step)
        p = np.zeros((aa.shape[0], 3))
        other = [i for i in range(3) if i != axis]
        p[:, other[0]] = aa
        p[:, other[1]] = bb
        p[:, axis] = sign * extents[axis] / 2
        n = np.zeros((aa.shape[0], 3))
        n[:, axis] = sign
        pts.append(p)
        nrm.append(n)
        col.append(np.tile(np.asarray(face_colors[f], dtype=np.uint8), (aa.shape[0], 1)))
    cloud = PointCloud(np.concatenate(pts), np.concatenate(nrm), np.concatenate(col))
    diameter = float(np.linalg.norm(extents))
    return ObjectModel(object_id, cloud, diameter,
                       [RigidPose.identity()] + list(symmetries or []))


def make_cylinder_model(object_id, radius, height, step, color=None,
                        symmetry_steps=0) -> ObjectModel:
    """Closed cylinder along z, centered at the origin."""
    if color is None:
        color = _PALETTE[object_id % len(_PALETTE)]
    n_theta = max(8, int(round(2 * np.pi * radius / step)))
    theta = np.arange(n_theta) * (2 * np.pi / n_theta)
    zs = np.arange(-height / 2 + step / 2, height / 2, step)
    tt, zz = np.meshgrid(theta, zs, indexing="ij")
    lateral = np.stack([radius * np.cos(tt.ravel()),
                        radius * np.sin(tt.ravel()), zz.ravel()], axis=1)
    lat_n = np.stack([np.cos(tt.ravel()), np.sin(tt.ravel()),
                      np.zeros(tt.size)], axis=1)
    caps, cap_n = [], []
    for sign in (+1, -1):
        aa, bb = _grid(2 * radius, 2 * radius, step)
        keep = aa * aa + bb * bb <= radius * radius
        p = np.stack([aa[keep], bb[keep],
                      np.full(keep.sum(), sign * height / 2)], axis=1)
        n = np.zeros_like(p)
        n[:, 2] = sign
        caps.append(p)
        cap_n.append(n)
    points = np.concatenate([lateral] + caps)
    normals = np.concatenate([lat_n] + cap_n)
    colors = np.tile(np.asarray(color, dtype=np.uint8), (points.shape[0], 1))
    syms = rotations_about_axis([0, 0, 1], symmetry_steps)[1:] if symmetry_steps > 1 else []
    diameter = float(np.hypot(2 * radius, height))
    return ObjectModel(object_id, PointCloud(points, normals, colors), diameter,
                       [RigidPose.identity()] + syms)


def make_sphere_model(object_id, radius, step, color=None) -> ObjectModel:
    """Sphere surface via a Fibonacci lattice, exact radial normals."""
    if color is None:
        color = _PALETTE[object_id % len(_PALETTE)]
    n = max(16, int(round(4 * np.pi * radius * radius / (step * step))))
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    golden = np.pi * (1 + 5 ** 0.5)
    theta = golden * i
    normals = np.stack([np.sin(phi) * np.cos(theta),
                        np.sin(phi) * np.sin(theta),
                        np.cos(phi)], axis=1)
    points = radius * normals
    colors = np.tile(np.asarray(color, dtype=np.uint8), (n, 1))
    return ObjectModel(object_id, PointCloud(points, normals.copy(), colors),
                       2.0 * radius, [RigidPose.identity()])


def make_plane_model(object_id, width, height, step, color=None) -> ObjectModel:
    """Single-sided plane patch in the xy plane, normal -z (faces the camera
    when placed with identity rotation at positive depth)."""
    if color is None:
        color = np.array([120, 120, 120], dtype=np.uint8)
    aa, bb = _grid(width, height, step)
    points = np.stack([aa, bb, np.zeros_like(aa)], axis=1)
    normals = np.zeros_like(points)
    normals[:, 2] = -1.0
    colors = np.tile(np.asarray(color, dtype=np.uint8), (points.shape[0], 1))
    return ObjectModel(object_id, PointCloud(points, normals, colors),
                       float(np.hypot(width, height)), [RigidPose.identity()])


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    models: list                         # ObjectModel choices
    n_objects: int
    camera: CameraIntrinsics
    depth_noise: float = 0.0             # sigma, meters
    seed: int = 0
    z_range: tuple = (0.5, 1.5)
    clutter: list = field(default_factory=list)   # [(ObjectModel, RigidPose)]

    def __post_init__(self):
        if self.n_objects < 1:
            raise ValueError("need at least one object")
        if self.depth_noise < 0:
            raise ValueError("depth noise must be nonnegative")


@dataclass
class GroundTruthInstance:
    object_id: int
    pose: RigidPose
    mask: BinaryMask
    visibility: float


@dataclass
class SyntheticScene:
    depth: DepthMap
    color: ColorImage
    camera: CameraIntrinsics
    instances: list


MAX_PLACEMENT_REJECTIONS = 1000


def _bounding_sphere(model: ObjectModel):
    center = model.cloud.points.mean(axis=0)
    radius = float(np.linalg.norm(model.cloud.points - center, axis=1).max())
    return center, radius


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Render one synthetic RGB-D frame with exact ground truth.

    Objects get rejection-sampled random poses: bounding spheres must not
    intersect and must project fully inside the image at z within z_range.
    Depth is z-buffered over all objects plus any clutter; Gaussian noise is
    added to the metric depth and re-quantized to 16 bits. Raises after
    MAX_PLACEMENT_REJECTIONS failed placement attempts.
    """
    rng = np.random.default_rng(spec.seed)
    K = spec.camera
    placed = []      # (model, pose, sphere_center_cam, sphere_radius)
    rejections = 0
    for _ in range(spec.n_objects):
        model = spec.models[rng.integers(len(spec.models))]
        m_center, m_radius = _bounding_sphere(model)
        while True:
            q = random_rotation(rng)
            z = rng.uniform(*spec.z_range)
            pad_u = K.fx * m_radius / max(z - m_radius, 1e-3) + 2
            pad_v = K.fy * m_radius / max(z - m_radius, 1e-3) + 2
            if 2 * pad_u > K.width - 1 or 2 * pad_v > K.height - 1 or z <= m_radius:
                rejections += 1
                if rejections >= MAX_PLACEMENT_REJECTIONS:
                    raise RuntimeError("object placement failed; scene spec infeasible")
                continue
            u = rng.uniform(pad_u, K.width - 1 - pad_u)
            v = rng.uniform(pad_v, K.height - 1 - pad_v)
            center = np.array([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])
            if all(np.linalg.norm(center - c) > m_radius + r
                   for _, _, c, r in placed):
                rot = RigidPose(q, np.zeros(3))
                pose = RigidPose(q, center - rot.apply_rotation(m_center))
                placed.append((model, pose, center, m_radius))
                break
            rejections += 1
            if rejections >= MAX_PLACEMENT_REJECTIONS:
                raise RuntimeError("object placement failed; scene spec infeasible")

    renderables = [(m, p) for m, p, _, _ in placed] + list(spec.clutter)
    all_pts, all_col, all_lab, all_spc = [], [], [], []
    for idx, (model, pose) in enumerate(renderables):
        pts = pose.apply(model.cloud.points)
        colors = model.cloud.colors
        if colors is None:
            colors = np.tile(_PALETTE[model.object_id % len(_PALETTE)],
                             (len(model.cloud), 1))
        spacing = estimate_point_spacing(model.cloud.points)
        all_pts.append(pts)
        all_col.append(colors)
        all_lab.append(np.full(pts.shape[0], idx, dtype=np.int64))
        all_spc.append(np.full(pts.shape[0], spacing))
    depth_f, color, label = render_splats(
        np.concatenate(all_pts), np.concatenate(all_col),
        np.concatenate(all_lab), K, np.concatenate(all_spc), gap_free=True)
    color[label < 0] = BACKGROUND_GRAY

    instances = []
    for idx, (model, pose, _, _) in enumerate(placed):
        mask = label == idx
        solo_depth, _, _ = render_splats(all_pts[idx], None, None, K,
                                        all_spc[idx][0], gap_free=True)
        unoccluded = int(np.isfinite(solo_depth).sum())
        visibility = float(mask.sum()) / unoccluded if unoccluded else 0.0
        instances.append(GroundTruthInstance(model.object_id, pose,
                                             BinaryMask(mask), visibility))

    finite = np.isfinite(depth_f)
    z = np.where(finite, depth_f, 0.0)
    if spec.depth_noise > 0:
        z = z + np.where(finite, rng.normal(0.0, spec.depth_noise, z.shape), 0.0)
    raw = np.clip(np.rint(z * 1000.0 / SYNTH_DEPTH_SCALE), 0, 65535).astype(np.uint16)
    raw[~finite] = 0
    return SyntheticScene(DepthMap(raw, SYNTH_DEPTH_SCALE), ColorImage(color),
                          K, instances)


# ---------------------------------------------------------------------------
# BOP-layout writing
# ---------------------------------------------------------------------------

def write_models_dir(out_dir, models):
    """Write obj_<id>.ply files plus models_info.json (mm units)."""
    os.makedirs(out_dir, exist_ok=True)
    info = {}
    for model in models:
        save_ply(os.path.join(out_dir, f"obj_{model.object_id:06d}.ply"), model.cloud)
        syms = []
        for s in model.symmetries[1:]:
            M = s.matrix()
            M[:3, 3] *= 1e3
            syms.append([float(v) for v in M.reshape(16)])
        entry = {"diameter": model.diameter * 1e3}
        if syms:
            entry["symmetries_discrete"] = syms
        info[str(model.object_id)] = entry
    with open(os.path.join(out_dir, "models_info.json"), "w") as f:
        json.dump(info, f, indent=1)


def write_bop_scene_sequence(out_dir, scenes, scene_id=0):
    """Write {im_id: SyntheticScene} in the BOP scene layout plus a
    detections.json that uses the ground-truth masks as stage-1 output."""
    scene_dir = os.path.join(out_dir, f"{scene_id:06d}")
    for sub in ("depth", "rgb", "mask_visib"):
        os.makedirs(os.path.join(scene_dir, sub), exist_ok=True)
    cameras, gt, gt_info, detections = {}, {}, {}, []
    for im_id in sorted(scenes):
        scene = scenes[im_id]
        cameras[str(im_id)] = {
            "cam_K": [float(v) for v in scene.camera.K.reshape(9)],
            "depth_scale": scene.depth.depth_scale,
        }
        save_depth_png(os.path.join(scene_dir, "depth", f"{im_id:06d}.png"), scene.depth)
        save_color_png(os.path.join(scene_dir, "rgb", f"{im_id:06d}.png"), scene.color)
        gt[str(im_id)] = []
        gt_info[str(im_id)] = []
        for g_idx, inst in enumerate(scene.instances):
            R = inst.pose.rotation_matrix()
            gt[str(im_id)].append({
                "obj_id": inst.object_id,
                "cam_R_m2c": [float(v) for v in R.reshape(9)],
                "cam_t_m2c": [float(v) for v in inst.pose.t * 1e3],
            })
            gt_info[str(im_id)].append({"visib_fract": inst.visibility})
            mask_rel = os.path.join("mask_visib", f"{im_id:06d}_{g_idx:06d}.png")
            save_mask(os.path.join(scene_dir, mask_rel), inst.mask)
            ys, xs = np.nonzero(inst.mask.bits)
            if xs.size == 0:
                continue
            bbox = [int(xs.min()), int(ys.min()),
                    int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)]
            detections.append({
                "scene_id": scene_id, "im_id": im_id, "obj_id": inst.object_id,
                "score": 1.0, "mask_path": mask_rel, "bbox": bbox,
            })
    with open(os.path.join(scene_dir, "scene_camera.json"), "w") as f:
        json.dump(cameras, f, indent=1)
    with open(os.path.join(scene_dir, "scene_gt.json"), "w") as f:
        json.dump(gt, f, indent=1)
    with open(os.path.join(scene_dir, "scene_gt_info.json"), "w") as f:
        json.dump(gt_info, f, indent=1)
    with open(os.path.join(scene_dir, "detections.json"), "w") as f:
        json.dump(detections, f, indent=1)
    return scene_dir


# ---------------------------------------------------------------------------
# Cut-paste training composites
# ---------------------------------------------------------------------------

@dataclass
class ComposeParams:
    max_objects: int = 20
    scale_range: tuple = (0.5, 2.0)

    def __post_init__(self):
        if self.max_objects < 1:
            raise ValueError("max_objects must be >= 1")


@dataclass
class PasteAnnotation:
    class_id: int
    mask: BinaryMask
    bbox: tuple        # (x, y, w, h)


def _warp_crop(crop, scale, angle):
    """Rotate+scale an RGBA crop into its own tight canvas; None if degenerate."""
    h, w = crop.shape[:2]
    if scale == 1.0 and angle == 0.0:
        return crop
    c, s = math.cos(angle), math.sin(angle)
    corners = np.array([[0, 0], [w, 0], [0, h], [w, h]], dtype=np.float64)
    rot = scale * np.array([[c, -s], [s, c]])
    tc = corners @ rot.T
    lo = tc.min(axis=0)
    hi = tc.max(axis=0)
    ow, oh = int(math.ceil(hi[0] - lo[0])), int(math.ceil(hi[1] - lo[1]))
    if ow < 1 or oh < 1:
        return None
    M = np.array([[rot[0, 0], rot[0, 1], -lo[0]],
                  [rot[1, 0], rot[1, 1], -lo[1]]])
    return cv2.warpAffine(crop, M, (ow, oh), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0)


def paste_crop(canvas, label_map, crop_rgba, paste_index, scale, angle, top_left):
    """Alpha-composite one transformed crop; returns False when it cannot fit.

    canvas is modified in place (H, W, 3 float64), label_map (H, W int32)
    records which paste owns each covered pixel (alpha > 0).
    """
    warped = _warp_crop(np.asarray(crop_rgba), scale, angle)
    if warped is None:
        return False
    oh, ow = warped.shape[:2]
    H, W = canvas.shape[:2]
    if ow > W or oh > H:
        return False
    x0, y0 = top_left
    if not (0 <= x0 <= W - ow and 0 <= y0 <= H - oh):
        return False
    alpha = warped[:, :, 3].astype(np.float64) / 255.0
    region = canvas[y0:y0 + oh, x0:x0 + ow]
    region[...] = alpha[:, :, None] * warped[:, :, :3] + (1 - alpha[:, :, None]) * region
    label_map[y0:y0 + oh, x0:x0 + ow][alpha > 0] = paste_index
    return True


def compose_training_image(crops, background: ColorImage,
                           params: ComposeParams, rng):
    """Paste 1..max_objects random crops onto a background.

    crops: list of (rgba uint8 array, class_id). Later pastes occlude
    earlier ones; each annotation keeps only its visible pixels and is
    dropped entirely when fully covered. Crops that would not fit after
    scaling are skipped.
    """
    if not crops:
        raise ValueError("no crops to paste")
    canvas = background.pixels.astype(np.float64).copy()
    label_map = np.full(canvas.shape[:2], -1, dtype=np.int32)
    k = int(rng.integers(1, params.max_objects + 1))
    class_ids = []
    for i in range(k):
        crop, class_id = crops[rng.integers(len(crops))]
        scale = float(rng.uniform(*params.scale_range))
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
        warped = _warp_crop(np.asarray(crop), scale, angle)
        if warped is None:
            class_ids.append(None)
            continue
        oh, ow = warped.shape[:2]
        H, W = canvas.shape[:2]
        if ow > W or oh > H:
            class_ids.append(None)
            continue
        x0 = int(rng.integers(0, W - ow + 1))
        y0 = int(rng.integers(0, H - oh + 1))
        alpha = warped[:, :, 3].astype(np.float64) / 255.0
        region = canvas[y0:y0 + oh, x0:x0 + ow]
        region[...] = alpha[:, :, None] * warped[:, :, :3] + (1 - alpha[:, :, None]) * region
        label_map[y0:y0 + oh, x0:x0 + ow][alpha > 0] = i
        class_ids.append(class_id)

    annotations = []
    for i, class_id in enumerate(class_ids):
        if class_id is None:
            continue
        mask = label_map == i
        ys, xs = np.nonzero(mask)
        if xs.size == 0:
            continue
        bbox = (int(xs.min()), int(ys.min()),
                int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
        annotations.append(PasteAnnotation(class_id, BinaryMask(mask), bbox))
    image = ColorImage(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))
    return image, annotations


def _flip_horizontal(image: ColorImage, annotations):
    W = image.width
    flipped = ColorImage(image.pixels[:, ::-1].copy())
    out = []
    for a in annotations:
        bits = a.mask.bits[:, ::-1].copy()
        x, y, w, h = a.bbox
        out.append(PasteAnnotation(a.class_id, BinaryMask(bits),
                                   (W - x - w, y, w, h)))
    return flipped, out


def _color_jitter(image: ColorImage, rng):
    scale = rng.uniform(0.8, 1.2, size=3)
    px = np.clip(np.rint(image.pixels.astype(np.float64) * scale), 0, 255)
    return ColorImage(px.astype(np.uint8))


def build_training_set(crops, backgrounds, out_dir, n_images=10000,
                       val_fraction=0.1, augment_fraction=0.7,
                       params=None, seed=0):
    """Generate a composited dataset with a deterministic validation split.

    The first ceil(n_images * val_fraction) images (by index) become the
    validation split; the rest are training. A fraction of training images
    gets one augmentation: a horizontal flip (masks follow) or a channel-wise
    color rescale. Per-image RNG streams are spawned from the seed, so the
    dataset is bit-identical across runs. Annotations are written in the
    detections JSON format (train.json / val.json).
    """
    if not crops or not backgrounds:
        raise ValueError("need at least one crop and one background")
    if params is None:
        params = ComposeParams()
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    n_val = math.ceil(n_images * val_fraction)
    streams = np.random.SeedSequence(seed).spawn(n_images)
    split = {"train": [], "val": []}
    png_fast = [cv2.IMWRITE_PNG_COMPRESSION, 1]
    for i in range(n_images):
        rng = np.random.default_rng(streams[i])
        background = backgrounds[rng.integers(len(backgrounds))]
        image, annotations = compose_training_image(crops, background, params, rng)
        is_val = i < n_val
        if not is_val and augment_fraction > 0 and rng.random() < augment_fraction:
            if rng.random() < 0.5:
                image, annotations = _flip_horizontal(image, annotations)
            else:
                image = _color_jitter(image, rng)
        img_rel = os.path.join("images", f"{i:06d}.png")
        cv2.imwrite(os.path.join(out_dir, img_rel),
                    cv2.cvtColor(image.pixels, cv2.COLOR_RGB2BGR), png_fast)
        entries = []
        for j, a in enumerate(annotations):
            mask_rel = os.path.join("masks", f"{i:06d}_{j:02d}.png")
            cv2.imwrite(os.path.join(out_dir, mask_rel),
                        a.mask.bits.astype(np.uint8) * 255, png_fast)
            entries.append({"scene_id": 0, "im_id": i, "obj_id": a.class_id,
                            "score": 1.0, "mask_path": mask_rel,
                            "bbox": list(a.bbox)})
        split["val" if is_val else "train"].extend(entries)
    for name in ("train", "val"):
        with open(os.path.join(out_dir, f"{name}.json"), "w") as f:
            json.dump(split[name], f, indent=1)
    return {"n_train": n_images - n_val, "n_val": n_val,
            "train_annotations": len(split["train"]),
            "val_annotations": len(split["val"])}
