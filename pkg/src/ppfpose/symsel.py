"""Symmetry disambiguation by keypoint matching against rendered candidates.

Geometry alone cannot tell symmetric poses apart; texture can. The object is
splat-rendered at every symmetry of the candidate pose and sparse corner
keypoints of each rendering are matched against the scene RGB image inside
the render footprint. The symmetry with the most matches wins.

The matcher is intentionally minimal: min-eigenvalue corner response on the
grayscale image, 9x9 zero-mean unit-norm patch descriptors, mutual-nearest
matching by normalized cross-correlation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter, uniform_filter

from .geom import CameraIntrinsics, RigidPose
from .rgbd import BinaryMask, ColorImage, ObjectModel, dilate_mask, estimate_point_spacing
from .splat import render_splats

PATCH_HALF = 4                 # 9x9 descriptor patches
NMS_RADIUS = 5
MAX_KEYPOINTS = 200
RESPONSE_PERCENTILE = 90.0
NCC_MIN = 0.8
MATCH_MAX_DIST_PX = 20.0
FOOTPRINT_DILATION_PX = 5


@dataclass
class SplatRender:
    color: ColorImage
    depth: np.ndarray           # (H, W) float64, +inf where empty
    mask: BinaryMask            # finite-depth footprint


def splat_render(model: ObjectModel, pose: RigidPose, K: CameraIntrinsics,
                 point_spacing=None) -> SplatRender:
    """Render the model cloud at `pose` as colored disk splats.

    `point_spacing` is the cloud's world sampling step; when omitted it is
    estimated from nearest-neighbor distances. Raises if the whole object
    sits behind the camera.
    """
    if model.cloud.colors is None:
        raise ValueError("splat rendering needs per-vertex colors")
    pts = pose.apply(model.cloud.points)
    if not np.any(pts[:, 2] > 0):
        raise ValueError("object is entirely behind the camera")
    if point_spacing is None:
        point_spacing = estimate_point_spacing(model.cloud.points)
    depth, color, _ = render_splats(pts, model.cloud.colors, None, K, point_spacing)
    return SplatRender(ColorImage(color), depth, BinaryMask(np.isfinite(depth)))


def _grayscale(image: ColorImage):
    p = image.pixels.astype(np.float64)
    return 0.299 * p[:, :, 0] + 0.587 * p[:, :, 1] + 0.114 * p[:, :, 2]


def detect_keypoints(image: ColorImage, region: BinaryMask):
    """Corner keypoints and patch descriptors inside `region`.

    Response is the smaller eigenvalue of the 3x3-summed gradient covariance.
    Keypoints are local maxima above the 90th percentile of the in-region
    response, non-max suppressed, capped at MAX_KEYPOINTS, described by
    zero-mean unit-norm 9x9 grayscale patches.

    Returns (positions (M, 2) float64 as (x, y), descriptors (M, 81)).
    """
    gray = _grayscale(image)
    h, w = gray.shape
    gy, gx = np.gradient(gray)
    sxx = uniform_filter(gx * gx, size=3)
    syy = uniform_filter(gy * gy, size=3)
    sxy = uniform_filter(gx * gy, size=3)
    tr = 0.5 * (sxx + syy)
    det = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))
    response = tr - det                      # min eigenvalue
    response[~region.bits] = 0.0

    in_region = response[region.bits]
    if in_region.size == 0 or not np.any(in_region > 0):
        return np.zeros((0, 2)), np.zeros((0, (2 * PATCH_HALF + 1) ** 2))
    thresh = np.percentile(in_region, RESPONSE_PERCENTILE)
    thresh = max(thresh, 1e-12)
    local_max = response >= maximum_filter(response, size=2 * NMS_RADIUS + 1)
    cand = np.nonzero((response >= thresh) & local_max & region.bits)
    rows, cols = cand
    if rows.size == 0:
        return np.zeros((0, 2)), np.zeros((0, (2 * PATCH_HALF + 1) ** 2))
    order = np.argsort(-response[rows, cols], kind="stable")[:MAX_KEYPOINTS]
    rows, cols = rows[order], cols[order]

    positions = []
    descriptors = []
    for r, c in zip(rows, cols):
        if not (PATCH_HALF <= r < h - PATCH_HALF and PATCH_HALF <= c < w - PATCH_HALF):
            continue
        patch = gray[r - PATCH_HALF:r + PATCH_HALF + 1,
                     c - PATCH_HALF:c + PATCH_HALF + 1].ravel()
        patch = patch - patch.mean()
        n = np.linalg.norm(patch)
        if n < 1e-9:
            continue
        positions.append((float(c), float(r)))
        descriptors.append(patch / n)
    if not positions:
        return np.zeros((0, 2)), np.zeros((0, (2 * PATCH_HALF + 1) ** 2))
    return np.asarray(positions), np.stack(descriptors)


def match_keypoints(a: ColorImage, b: ColorImage, region: BinaryMask) -> int:
    """Count of mutual-nearest keypoint matches between two equal-size images.

    A pair matches when each is the other's best descriptor by normalized
    cross-correlation, the correlation is at least NCC_MIN and the keypoints
    are within MATCH_MAX_DIST_PX pixels of each other. Renders of flat-shaded
    objects repeat descriptors along edges, so NCC ties are resolved by pixel
    distance; matching an image against itself then matches every keypoint.
    """
    if a.pixels.shape != b.pixels.shape:
        raise ValueError("images must have equal size")
    pa, da = detect_keypoints(a, region)
    pb, db = detect_keypoints(b, region)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        return 0
    ncc = da @ db.T
    dist = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
    tie_eps = 1e-9
    far = np.where(ncc >= ncc.max(axis=1, keepdims=True) - tie_eps, dist, np.inf)
    best_ab = np.argmin(far, axis=1)
    far_t = np.where(ncc >= ncc.max(axis=0, keepdims=True) - tie_eps, dist, np.inf)
    best_ba = np.argmin(far_t, axis=0)
    ia = np.arange(pa.shape[0])
    mutual = best_ba[best_ab] == ia
    score_ok = ncc[ia, best_ab] >= NCC_MIN
    dist_ok = dist[ia, best_ab] <= MATCH_MAX_DIST_PX
    return int(np.count_nonzero(mutual & score_ok & dist_ok))


def select_symmetry(rgb: ColorImage, model: ObjectModel, pose: RigidPose,
                    K: CameraIntrinsics, point_spacing=None) -> RigidPose:
    """Pick the symmetry of `pose` whose rendering best matches the RGB image.

    Each symmetry S yields a candidate pose ∘ S, rendered and scored by
    keypoint match count inside the dilated render footprint. Ties keep the
    earliest candidate, so the identity (always listed first) wins when
    nothing beats it. Models without colors are returned unchanged; the rule
    needs texture to say anything.
    """
    if model.cloud.colors is None:
        return pose
    if len(model.symmetries) <= 1:
        return pose
    if point_spacing is None:
        point_spacing = estimate_point_spacing(model.cloud.points)
    best_pose = None
    best_count = -1
    for sym in model.symmetries:
        candidate = pose.compose(sym)
        try:
            render = splat_render(model, candidate, K, point_spacing)
        except ValueError:
            continue
        if render.mask.count() == 0:
            continue
        region = dilate_mask(render.mask, FOOTPRINT_DILATION_PX)
        count = match_keypoints(render.color, rgb, region)
        if count > best_count:
            best_count = count
            best_pose = candidate
    return pose if best_pose is None else best_pose
