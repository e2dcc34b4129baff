"""Synthetic box-world scenes with analytically rendered depth.

Boxes are axis-aligned and snapped to the voxel lattice (faces inset by a
quarter voxel) so the rendered surface samples fall inside the boxes' own
voxels and the label volume is unambiguous.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxel import DepthImage, Scene, VoxelGridSpec, voxelize

# 11 semantic categories plus empty
CLASS_NAMES = ("empty", "ceiling", "floor", "wall", "window", "chair", "bed", "sofa",
               "table", "tvs", "furniture", "objects")


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]   # world (X, Y, Z) meters
    hi: tuple[float, float, float]
    label: int


def look_pose(position, pitch_deg: float):
    """Camera-to-world pose looking along +Z, tilted down by ``pitch_deg``, world Y up."""
    th = np.deg2rad(pitch_deg)
    forward = np.array([0.0, -np.sin(th), np.cos(th)])
    down = np.array([0.0, -np.cos(th), -np.sin(th)])
    right = np.cross(down, forward)
    return np.stack([right, down, forward], axis=1), np.asarray(position, dtype=np.float64)


def render_depth(boxes, width, height, fx, fy, cx, cy, rotation, translation) -> DepthImage:
    """Z-buffer depth of the boxes via per-pixel slab intersection."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    dirs_cam = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ rotation.T
    best = np.full(dirs.shape[0], np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        for box in boxes:
            t1 = (np.asarray(box.lo) - translation) * inv
            t2 = (np.asarray(box.hi) - translation) * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tmax >= tmin) & (tmin > 0)
            best = np.where(hit & (tmin < best), tmin, best)
    # dirs_cam has unit z, so the ray parameter is the camera depth
    depth = np.where(np.isfinite(best), best, 0.0).reshape(height, width)
    return DepthImage(depth, fx, fy, cx, cy, rotation, translation)


def label_volume(boxes, spec: VoxelGridSpec) -> np.ndarray:
    centers = spec.voxel_centers()
    labels = np.zeros(spec.dims, dtype=np.uint8)
    for box in boxes:
        inside = np.all((centers >= np.asarray(box.lo)) & (centers <= np.asarray(box.hi)), axis=-1)
        labels[inside] = box.label
    return labels


def _lattice_box(spec, lo_idx, hi_idx, label):
    """Box covering voxel index range [lo, hi) per (x, y, z) axis, faces inset by 1/4 voxel."""
    o = np.asarray(spec.origin)
    s = spec.voxel_size
    lo = o + (np.asarray(lo_idx) + 0.25) * s
    hi = o + (np.asarray(hi_idx) - 0.25) * s
    return Box(tuple(lo), tuple(hi), label)


def room_boxes(spec: VoxelGridSpec, seed: int = 0, n_objects: int = 6):
    D, H, W = spec.dims
    rng = np.random.default_rng(seed)
    pad = 2 * W
    boxes = [
        _lattice_box(spec, (-pad, -pad, -pad), (W + pad, 1, D + pad), 2),                # floor
        _lattice_box(spec, (-pad, -pad, D - 2), (W + pad, H + pad, D + pad), 3),  # back wall
        _lattice_box(spec, (-pad, -pad, -pad), (2, H + pad, D + pad), 3),  # side walls
        _lattice_box(spec, (W - 2, -pad, -pad), (W + pad, H + pad, D + pad), 3),
    ]
    furniture = (6, 7, 8, 10, 5, 11)
    for i in range(n_objects):
        sx = int(rng.integers(W // 8, W // 4))
        sz = int(rng.integers(D // 10, D // 5))
        sy = int(rng.integers(H // 8, H // 3))
        x0 = int(rng.integers(W // 12, W - W // 12 - sx))
        z0 = int(rng.integers(D // 3, D - D // 12 - sz))
        boxes.append(_lattice_box(spec, (x0, 1, z0), (x0 + sx, 1 + sy, z0 + sz), furniture[i % len(furniture)]))
    return boxes


def make_scene(spec: VoxelGridSpec, seed: int = 0, n_objects: int = 6, image_size=(160, 120)):
    """Render a synthetic room; returns (DepthImage, Scene)."""
    boxes = room_boxes(spec, seed, n_objects)
    w, h = image_size
    f = 0.85 * w
    extent = np.asarray(spec.dims[::-1]) * spec.voxel_size
    center_x = spec.origin[0] + extent[0] / 2
    height = spec.origin[1] + 0.55 * extent[1]
    rot, trans = look_pose((center_x, height, spec.origin[2] - 0.25 * extent[2]), 20.0)
    depth = render_depth(boxes, w, h, f, f, (w - 1) / 2, (h - 1) / 2, rot, trans)
    ftsdf, vis = voxelize(depth, spec)
    return depth, Scene(ftsdf.astype(np.float32), label_volume(boxes, spec), vis)
