"""RGB-D and model ingestion for BOP-style data.

Loads 16-bit depth PNGs with per-image intrinsics, PLY vertex clouds and
binary instance masks, and turns depth images into oriented point clouds.
File coordinates follow the BOP convention (millimeters); everything is
converted to meters at this boundary and stays metric in memory.

Expected directory layout of a scene:

    <scene>/scene_camera.json      per-image cam_K (9 floats, row-major) + depth_scale
    <scene>/depth/<im_id>.png      16-bit depth, metric depth = raw * depth_scale mm
    <scene>/rgb/<im_id>.png        optional 8-bit RGB
    <scene>/scene_gt.json          per-image list of {obj_id, cam_R_m2c, cam_t_m2c}

Object models: <models>/obj_<id>.ply plus models_info.json with diameter (mm),
symmetries_discrete (4x4 row-major, mm) and symmetries_continuous (axis+offset).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np
from scipy.spatial import cKDTree

from .geom import CameraIntrinsics, RigidPose

# Neighbors whose depth differs from the window center by more than this
# relative amount are treated as a different surface during normal estimation.
NORMAL_DEPTH_REL_TOL = 0.02
NORMAL_WINDOW = 5
NORMAL_MIN_NEIGHBORS = 6

DIAMETER_EXACT_LIMIT = 5000


@dataclass
class DepthMap:
    """16-bit depth image; raw value 0 means no measurement."""

    raw: np.ndarray          # (H, W) uint16
    depth_scale: float       # millimeters per raw unit

    @property
    def width(self):
        return self.raw.shape[1]

    @property
    def height(self):
        return self.raw.shape[0]

    def meters(self):
        """Metric depth in meters, 0 where there is no measurement."""
        return self.raw.astype(np.float64) * (self.depth_scale * 1e-3)


@dataclass
class ColorImage:
    pixels: np.ndarray       # (H, W, 3) uint8, RGB

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]


@dataclass
class BinaryMask:
    bits: np.ndarray         # (H, W) bool

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def height(self):
        return self.bits.shape[0]

    def count(self):
        return int(self.bits.sum())


@dataclass
class PointCloud:
    """Parallel arrays of 3D points with optional unit normals and colors.

    `pixels` keeps the (row, col) origin of each point for clouds that came
    from a depth image; it is what makes windowed normal estimation possible
    and is dropped by any operation that breaks the image organization.
    """

    points: np.ndarray                     # (N, 3) float64, meters
    normals: Optional[np.ndarray] = None   # (N, 3) float64, unit
    colors: Optional[np.ndarray] = None    # (N, 3) uint8
    pixels: Optional[np.ndarray] = None    # (N, 2) int32, (row, col)

    def __len__(self):
        return self.points.shape[0]

    def select(self, index) -> "PointCloud":
        return PointCloud(
            self.points[index],
            None if self.normals is None else self.normals[index],
            None if self.colors is None else self.colors[index],
            None if self.pixels is None else self.pixels[index],
        )


@dataclass
class ObjectModel:
    """Object vertex cloud plus the metadata the pipeline and metrics need."""

    object_id: int
    cloud: PointCloud
    diameter: float                        # meters
    symmetries: list     # list[RigidPose], identity first

    def __post_init__(self):
        if self.diameter <= 0:
            raise ValueError("diameter must be positive")
        if not self.symmetries:
            self.symmetries = [RigidPose.identity()]

    @staticmethod
    def from_cloud(object_id, cloud, diameter=None, symmetries=None):
        if diameter is None:
            diameter = max_pairwise_distance(cloud.points)
        syms = [RigidPose.identity()]
        if symmetries:
            syms += [s for s in symmetries if rotation_or_offset_nontrivial(s)]
        return ObjectModel(object_id, cloud, diameter, syms)


def rotation_or_offset_nontrivial(pose: RigidPose) -> bool:
    return (np.linalg.norm(pose.t) > 1e-12
            or abs(abs(pose.q[0]) - 1.0) > 1e-12)


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------

def max_pairwise_distance(points) -> float:
    """Largest distance between any two points.

    Exact up to DIAMETER_EXACT_LIMIT points; beyond that, exact over a
    farthest-point subsample of that size (a tight lower bound in practice).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 2:
        return 0.0
    if pts.shape[0] > DIAMETER_EXACT_LIMIT:
        pts = farthest_point_subsample(pts, DIAMETER_EXACT_LIMIT)
    best = 0.0
    chunk = 512
    for i in range(0, pts.shape[0], chunk):
        d = np.linalg.norm(pts[i:i + chunk, None, :] - pts[None, :, :], axis=2)
        best = max(best, float(d.max()))
    return best


def farthest_point_subsample(points, k):
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n <= k:
        return pts.copy()
    picked = np.empty(k, dtype=np.int64)
    picked[0] = 0
    dist = np.linalg.norm(pts - pts[0], axis=1)
    for i in range(1, k):
        picked[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(pts - pts[picked[i]], axis=1))
    return pts[picked]


def estimate_point_spacing(points, sample=2000, rng_seed=0):
    """Median nearest-neighbor distance; robust guess of a cloud's sampling step."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 2:
        return 0.0
    if pts.shape[0] > sample:
        idx = np.random.default_rng(rng_seed).choice(pts.shape[0], sample, replace=False)
        pick = pts[idx]
    else:
        pick = pts
    tree = cKDTree(pts)
    d, _ = tree.query(pick, k=2)
    return float(np.median(d[:, 1]))


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def load_ply(path) -> PointCloud:
    """Read vertices from an ASCII or binary-little-endian PLY file.

    Coordinates are expected in millimeters and come back in meters. Normals
    (nx, ny, nz) and colors (red, green, blue) are picked up when present;
    faces and any elements after the vertex element are ignored. The vertex
    element must come first.
    """
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        elements = []   # (name, count, [(prop_name, dtype_code)])
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: unexpected end of header")
            tokens = line.decode("ascii", "replace").strip().split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if not elements:
                    raise ValueError(f"{path}: property before element")
                if tokens[1] == "list":
                    elements[-1][2].append((tokens[-1], "list", tokens[2], tokens[3]))
                else:
                    elements[-1][2].append((tokens[-1], tokens[1]))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise ValueError(f"{path}: unsupported PLY format '{fmt}'")
        if not elements or elements[0][0] != "vertex":
            raise ValueError(f"{path}: unsupported PLY element layout (vertex must be first)")
        name, count, props = elements[0]
        if count == 0:
            raise ValueError(f"{path}: PLY has zero vertices")
        if any(p[1] == "list" for p in props):
            raise ValueError(f"{path}: list property in vertex element is unsupported")
        for p in props:
            if p[1] not in _PLY_TYPES:
                raise ValueError(f"{path}: unsupported property type '{p[1]}'")
        names = [p[0] for p in props]
        if not all(c in names for c in ("x", "y", "z")):
            raise ValueError(f"{path}: vertex element lacks x/y/z")

        if fmt == "ascii":
            rows = []
            for _ in range(count):
                rows.append(f.readline().split())
            data = np.asarray(rows, dtype=np.float64)
            cols = {n: data[:, i] for i, n in enumerate(names)}
        else:
            dtype = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in props])
            buf = f.read(count * dtype.itemsize)
            if len(buf) < count * dtype.itemsize:
                raise ValueError(f"{path}: truncated vertex data")
            rec = np.frombuffer(buf, dtype=dtype, count=count)
            cols = {n: rec[n].astype(np.float64) for n in names}

    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1) * 1e-3
    if not np.all(np.isfinite(points)):
        raise ValueError(f"{path}: non-finite vertex coordinates")
    normals = None
    if all(c in cols for c in ("nx", "ny", "nz")):
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
        norms = np.linalg.norm(normals, axis=1)
        good = norms > 1e-12
        normals[good] /= norms[good, None]
    colors = None
    if all(c in cols for c in ("red", "green", "blue")):
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)
        colors = np.clip(colors, 0, 255).astype(np.uint8)
    return PointCloud(points, normals, colors)


def save_ply(path, cloud: PointCloud, ascii_format=False):
    """Write a vertex-only PLY, meters -> millimeters, float32 coordinates."""
    pts = (cloud.points * 1e3).astype(np.float32)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(len(cloud), dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if cloud.normals is not None:
        nrm = cloud.normals.astype(np.float32)
        rec["nx"], rec["ny"], rec["nz"] = nrm[:, 0], nrm[:, 1], nrm[:, 2]
    if cloud.colors is not None:
        rec["red"], rec["green"], rec["blue"] = (cloud.colors[:, 0],
                                                 cloud.colors[:, 1],
                                                 cloud.colors[:, 2])
    header = ["ply",
              "format ascii 1.0" if ascii_format else "format binary_little_endian 1.0",
              f"element vertex {len(cloud)}"]
    type_names = {"<f4": "float", "u1": "uchar"}
    for fname, fcode in fields:
        header.append(f"property {type_names[fcode]} {fname}")
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if ascii_format:
            for row in rec:
                f.write((" ".join(str(v) for v in row) + "\n").encode("ascii"))
        else:
            f.write(rec.tobytes())


# ---------------------------------------------------------------------------
# Models directory
# ---------------------------------------------------------------------------

def load_models_info(models_dir):
    """Parse models_info.json: per-object diameter (m) and symmetry poses (m)."""
    path = os.path.join(models_dir, "models_info.json")
    with open(path) as f:
        raw = json.load(f)
    info = {}
    for key, entry in raw.items():
        obj_id = int(key)
        diameter = float(entry["diameter"]) * 1e-3
        syms = []
        for mat in entry.get("symmetries_discrete", []):
            M = np.asarray(mat, dtype=np.float64).reshape(4, 4)
            syms.append(RigidPose.from_rt(M[:3, :3], M[:3, 3] * 1e-3))
        continuous = []
        for c in entry.get("symmetries_continuous", []):
            continuous.append((np.asarray(c["axis"], dtype=np.float64),
                               np.asarray(c.get("offset", [0, 0, 0]), dtype=np.float64) * 1e-3))
        info[obj_id] = {"diameter": diameter, "symmetries_discrete": syms,
                        "symmetries_continuous": continuous}
    return info


def discretize_continuous_symmetry(axis, offset, steps):
    """Rotations about an (axis, offset) line, sampled at `steps` equal angles."""
    poses = []
    for k in range(1, steps):
        angle = 2.0 * np.pi * k / steps
        rot = RigidPose.from_axis_angle(axis, angle)
        # Conjugate by the offset so the rotation axis passes through it.
        t = offset - rot.apply_rotation(offset)
        poses.append(RigidPose(rot.q, t))
    return poses


def load_object_model(models_dir, object_id, continuous_steps=36) -> ObjectModel:
    """Load obj_<id>.ply plus models_info metadata into an ObjectModel.

    Continuous symmetries are discretized to `continuous_steps` rotations so
    that downstream pose metrics can treat every model the same way.
    """
    ply_path = os.path.join(models_dir, f"obj_{object_id:06d}.ply")
    if not os.path.exists(ply_path):
        raise FileNotFoundError(f"model file not found: {ply_path}")
    cloud = load_ply(ply_path)
    info_path = os.path.join(models_dir, "models_info.json")
    diameter = None
    symmetries = []
    if os.path.exists(info_path):
        info = load_models_info(models_dir).get(object_id)
        if info is not None:
            diameter = info["diameter"]
            symmetries = list(info["symmetries_discrete"])
            for axis, offset in info["symmetries_continuous"]:
                symmetries += discretize_continuous_symmetry(axis, offset, continuous_steps)
    return ObjectModel.from_cloud(object_id, cloud, diameter, symmetries)


# ---------------------------------------------------------------------------
# Scene loading
# ---------------------------------------------------------------------------

def load_scene(scene_dir, image_id):
    """Load one image of a BOP scene: depth, optional RGB, intrinsics."""
    cam_path = os.path.join(scene_dir, "scene_camera.json")
    with open(cam_path) as f:
        cameras = json.load(f)
    key = str(image_id)
    if key not in cameras:
        raise KeyError(f"image id {image_id} not in {cam_path}")
    entry = cameras[key]
    K = np.asarray(entry["cam_K"], dtype=np.float64).reshape(3, 3)
    depth_scale = float(entry["depth_scale"])

    depth_path = os.path.join(scene_dir, "depth", f"{image_id:06d}.png")
    raw = cv2.imread(depth_path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(f"missing depth image: {depth_path}")
    if raw.dtype != np.uint16:
        raise ValueError(f"{depth_path}: expected 16-bit depth, got {raw.dtype}")
    depth = DepthMap(raw, depth_scale)

    color = None
    rgb_path = os.path.join(scene_dir, "rgb", f"{image_id:06d}.png")
    if os.path.exists(rgb_path):
        bgr = cv2.imread(rgb_path, cv2.IMREAD_COLOR)
        if bgr is None:
            raise ValueError(f"unreadable rgb image: {rgb_path}")
        if bgr.shape[:2] != raw.shape[:2]:
            raise ValueError(f"{rgb_path}: rgb/depth size mismatch")
        color = ColorImage(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))

    intrinsics = CameraIntrinsics.from_K(K, raw.shape[1], raw.shape[0])
    return depth, color, intrinsics


def load_scene_gt(scene_dir):
    """Ground-truth poses per image id: {im_id: [(obj_id, RigidPose), ...]} in meters."""
    with open(os.path.join(scene_dir, "scene_gt.json")) as f:
        raw = json.load(f)
    out = {}
    for key, entries in raw.items():
        gts = []
        for e in entries:
            R = np.asarray(e["cam_R_m2c"], dtype=np.float64).reshape(3, 3)
            t = np.asarray(e["cam_t_m2c"], dtype=np.float64) * 1e-3
            gts.append((int(e["obj_id"]), RigidPose.from_rt(R, t)))
        out[int(key)] = gts
    return out


def load_scene_gt_info(scene_dir):
    """Per-instance visibility fractions, parallel to scene_gt.json entries."""
    path = os.path.join(scene_dir, "scene_gt_info.json")
    if not os.path.exists(path):
        return None
    with open(path) as f:
        raw = json.load(f)
    return {int(k): [float(e.get("visib_fract", 1.0)) for e in v] for k, v in raw.items()}


def load_mask(path) -> BinaryMask:
    img = cv2.imread(path, cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise FileNotFoundError(f"missing mask image: {path}")
    return BinaryMask(img > 0)


def save_mask(path, mask: BinaryMask):
    cv2.imwrite(path, mask.bits.astype(np.uint8) * 255)


def save_depth_png(path, depth: DepthMap):
    cv2.imwrite(path, depth.raw)


def save_color_png(path, image: ColorImage):
    cv2.imwrite(path, cv2.cvtColor(image.pixels, cv2.COLOR_RGB2BGR))


# ---------------------------------------------------------------------------
# Depth -> oriented points
# ---------------------------------------------------------------------------

def unproject_depth(depth: DepthMap, K: CameraIntrinsics,
                    mask: Optional[BinaryMask] = None) -> PointCloud:
    """Back-project valid depth pixels to camera-frame 3D points.

    X = z * ((u - cx)/fx, (v - cy)/fy, 1). Pixels with raw depth 0 are
    skipped; `mask` further restricts which pixels contribute. The per-point
    pixel coordinates are kept on the cloud for later normal estimation.
    """
    z = depth.meters()
    valid = depth.raw > 0
    if mask is not None:
        if mask.bits.shape != depth.raw.shape:
            raise ValueError("mask size does not match depth image")
        valid = valid & mask.bits
    rows, cols = np.nonzero(valid)
    zv = z[rows, cols]
    pts = np.empty((rows.shape[0], 3))
    pts[:, 0] = (cols - K.cx) / K.fx * zv
    pts[:, 1] = (rows - K.cy) / K.fy * zv
    pts[:, 2] = zv
    pixels = np.stack([rows, cols], axis=1).astype(np.int32)
    return PointCloud(pts, pixels=pixels)


def estimate_normals(depth: DepthMap, K: CameraIntrinsics, cloud: PointCloud,
                     window=NORMAL_WINDOW,
                     depth_rel_tol=NORMAL_DEPTH_REL_TOL,
                     min_neighbors=NORMAL_MIN_NEIGHBORS) -> PointCloud:
    """Per-point normals by plane fits over a pixel window of the depth image.

    For every cloud point, valid measurements inside a window x window pixel
    neighborhood are gathered; neighbors whose depth differs from the center
    by more than depth_rel_tol (relative) are rejected so normals do not smear
    across object boundaries. The plane normal is the smallest-eigenvalue
    direction of the neighborhood covariance, flipped to face the camera
    (n . p < 0). Points supported by fewer than min_neighbors samples
    (the center counts) are dropped.
    """
    if cloud.pixels is None:
        raise ValueError("cloud is not organized (missing pixel map)")
    z = depth.meters()
    h, w = z.shape
    rows = cloud.pixels[:, 0].astype(np.int64)
    cols = cloud.pixels[:, 1].astype(np.int64)
    zc = z[rows, cols]
    half = window // 2

    m = rows.shape[0]
    count = np.zeros(m)
    s1 = np.zeros((m, 3))
    s2 = np.zeros((m, 3, 3))
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            r2 = rows + dy
            c2 = cols + dx
            inb = (r2 >= 0) & (r2 < h) & (c2 >= 0) & (c2 < w)
            r2c = np.clip(r2, 0, h - 1)
            c2c = np.clip(c2, 0, w - 1)
            zn = z[r2c, c2c]
            ok = inb & (zn > 0) & (np.abs(zn - zc) <= depth_rel_tol * zc)
            zn = np.where(ok, zn, 0.0)
            p = np.empty((m, 3))
            p[:, 0] = (c2c - K.cx) / K.fx * zn
            p[:, 1] = (r2c - K.cy) / K.fy * zn
            p[:, 2] = zn
            wgt = ok.astype(np.float64)
            count += wgt
            s1 += p * wgt[:, None]
            s2 += p[:, :, None] * p[:, None, :] * wgt[:, None, None]

    keep = count >= min_neighbors
    cnt = count[keep]
    mean = s1[keep] / cnt[:, None]
    cov = s2[keep] / cnt[:, None, None] - mean[:, :, None] * mean[:, None, :]
    # Symmetrize against accumulation noise before the eigensolve.
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    pts = cloud.points[keep]
    flip = np.sum(normals * pts, axis=1) > 0
    normals[flip] = -normals[flip]
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    out = cloud.select(keep)
    out.normals = normals
    return out


def voxel_downsample(cloud: PointCloud, step: float) -> PointCloud:
    """One point per occupied voxel: centroid position, renormalized mean normal.

    Output voxels are emitted in sorted grid-index order, so the result is a
    deterministic function of the input cloud.
    """
    if step <= 0:
        raise ValueError("voxel step must be positive")
    if len(cloud) == 0:
        return PointCloud(cloud.points.copy())
    idx = np.floor(cloud.points / step).astype(np.int64)
    idx -= idx.min(axis=0)
    dims = idx.max(axis=0) + 1
    key = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    uniq, inverse = np.unique(key, return_inverse=True)
    n_vox = uniq.shape[0]
    cnt = np.bincount(inverse, minlength=n_vox).astype(np.float64)
    pts = np.stack([np.bincount(inverse, weights=cloud.points[:, i], minlength=n_vox)
                    for i in range(3)], axis=1) / cnt[:, None]
    normals = None
    if cloud.normals is not None:
        nsum = np.stack([np.bincount(inverse, weights=cloud.normals[:, i], minlength=n_vox)
                         for i in range(3)], axis=1)
        norms = np.linalg.norm(nsum, axis=1)
        degen = norms < 1e-9
        if np.any(degen):
            # Opposing normals cancelled; fall back to the first point's normal.
            first = np.full(n_vox, -1, dtype=np.int64)
            order = np.arange(len(cloud))[::-1]
            first[inverse[order]] = order
            nsum[degen] = cloud.normals[first[degen]]
            norms = np.linalg.norm(nsum, axis=1)
        normals = nsum / norms[:, None]
    colors = None
    if cloud.colors is not None:
        csum = np.stack([np.bincount(inverse, weights=cloud.colors[:, i].astype(np.float64),
                                     minlength=n_vox) for i in range(3)], axis=1)
        colors = np.clip(np.rint(csum / cnt[:, None]), 0, 255).astype(np.uint8)
    return PointCloud(pts, normals, colors)


def dilate_mask(mask: BinaryMask, radius: float) -> BinaryMask:
    """Morphological dilation by a disk of the given pixel radius."""
    if radius < 0:
        raise ValueError("dilation radius must be nonnegative")
    r = int(np.floor(radius + 1e-9))
    if r == 0:
        return BinaryMask(mask.bits.copy())
    span = np.arange(-r, r + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    kernel = ((dy * dy + dx * dx) <= radius * radius + 1e-9).astype(np.uint8)
    out = cv2.dilate(mask.bits.astype(np.uint8), kernel)
    return BinaryMask(out > 0)
