"""Mesh-free z-buffered point-splat rendering.

Each camera-frame point is projected and drawn as a small disk whose pixel
radius tracks the point spacing, so densely sampled clouds render as closed
surfaces. Used both for synthetic scene generation and for rendering model
candidates during symmetry disambiguation.
"""

from __future__ import annotations

import numpy as np

from .geom import CameraIntrinsics


def splat_radii(z, spacing, fx, gap_free=False):
    """Per-point disk radius in pixels.

    Default: max(1, round(0.5 * spacing * fx / z)), half the projected point
    pitch. With gap_free, the radius is ceil(pitch / sqrt(2)) so a square
    lattice of splats covers the plane without pinholes; synthetic ground
    truth uses this, at the cost of slightly fattened silhouettes.
    """
    pitch = spacing * fx / z
    if gap_free:
        r = np.ceil(pitch / np.sqrt(2.0) - 1e-9).astype(np.int64)
    else:
        r = np.rint(0.5 * pitch).astype(np.int64)
    return np.maximum(r, 1)


def render_splats(points, colors, labels, K: CameraIntrinsics, spacing,
                  gap_free=False):
    """Render camera-frame points into depth, color and label buffers.

    points:  (N, 3) camera frame, meters; points with z <= 0 are dropped.
    colors:  (N, 3) uint8 or None.
    labels:  (N,) int or None; written where the point wins the z-buffer.
    spacing: scalar or (N,) world-space point spacing in meters.

    Returns (depth, color, label): depth (H, W) float64 with +inf for empty
    pixels, color (H, W, 3) uint8 zeros where empty, label (H, W) int32 with
    -1 where empty.
    """
    pts = np.asarray(points, dtype=np.float64)
    h, w = K.height, K.width
    depth = np.full((h, w), np.inf)
    color = np.zeros((h, w, 3), dtype=np.uint8)
    label = np.full((h, w), -1, dtype=np.int32)

    front = pts[:, 2] > 1e-9
    if not np.any(front):
        return depth, color, label
    pts = pts[front]
    cols = None if colors is None else np.asarray(colors)[front]
    labs = None if labels is None else np.asarray(labels)[front]
    z = pts[:, 2]
    u = np.rint(K.fx * pts[:, 0] / z + K.cx).astype(np.int64)
    v = np.rint(K.fy * pts[:, 1] / z + K.cy).astype(np.int64)
    spc = np.broadcast_to(np.asarray(spacing, dtype=np.float64), z.shape)
    radii = splat_radii(z, spc, K.fx, gap_free)

    flat_depth = depth.ravel()
    # Pass 1: winner depth per pixel, over all disk offsets of all points.
    for r in np.unique(radii):
        sel = radii == r
        span = np.arange(-r, r + 1)
        dy, dx = np.meshgrid(span, span, indexing="ij")
        disk = (dy * dy + dx * dx) <= r * r
        for oy, ox in zip(dy[disk], dx[disk]):
            uu = u[sel] + ox
            vv = v[sel] + oy
            inb = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
            if not np.any(inb):
                continue
            flat = vv[inb] * w + uu[inb]
            np.minimum.at(flat_depth, flat, z[sel][inb])
    # Pass 2: the points matching the winning depth write color and label;
    # among exact ties the highest point index wins (deterministic).
    for r in np.unique(radii):
        sel = radii == r
        span = np.arange(-r, r + 1)
        dy, dx = np.meshgrid(span, span, indexing="ij")
        disk = (dy * dy + dx * dx) <= r * r
        for oy, ox in zip(dy[disk], dx[disk]):
            uu = u[sel] + ox
            vv = v[sel] + oy
            inb = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
            if not np.any(inb):
                continue
            flat = vv[inb] * w + uu[inb]
            win = flat_depth[flat] == z[sel][inb]
            if not np.any(win):
                continue
            flat = flat[win]
            if cols is not None:
                color.reshape(-1, 3)[flat] = cols[sel][inb][win]
            if labs is not None:
                label.ravel()[flat] = labs[sel][inb][win]

    return depth, color, label
