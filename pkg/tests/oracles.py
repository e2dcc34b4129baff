"""Slow, obviously-correct reference implementations used by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np


class MulCounter:
    """Counts scalar multiplications performed by the loop oracles."""

    def __init__(self):
        self.n = 0


class CountingNumpy:
    """Stand-in for the numpy module inside ccpnet.layers that tallies matmul MACs."""

    def __init__(self):
        self.macs = 0

    def __getattr__(self, name):
        return getattr(np, name)

    def matmul(self, a, b):
        out = np.matmul(a, b)
        batch = int(np.prod(out.shape[:-2]))
        self.macs += batch * a.shape[-2] * a.shape[-1] * b.shape[-1]
        return out


def conv3d_loops(x, w, b=None, stride=1, dilation=1, pad=0, groups=1, counter=None):
    """Direct nested-loop grouped convolution; x (B,C,D,H,W), w (F,C/groups,k,k,k).

    Every kernel tap over the zero-padded input counts as one multiply, the
    convention a dense implementation actually executes.
    """
    B, C, D, H, W = x.shape
    F, Cg, k = w.shape[0], w.shape[1], w.shape[2]
    Fg = F // groups
    xp = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
    out_sp = [(n + 2 * pad - dilation * (k - 1) - 1) // stride + 1 for n in (D, H, W)]
    y = np.zeros((B, F) + tuple(out_sp))
    for bi, f, oz, oy, ox in itertools.product(range(B), range(F), *map(range, out_sp)):
        g = f // Fg
        acc = 0.0 if b is None else float(b[f])
        for c in range(Cg):
            ci = g * Cg + c
            for kz, ky, kx in itertools.product(range(k), repeat=3):
                acc += w[f, c, kz, ky, kx] * xp[bi, ci, oz * stride + kz * dilation,
                                                oy * stride + ky * dilation, ox * stride + kx * dilation]
                if counter is not None:
                    counter.n += 1
        y[bi, f, oz, oy, ox] = acc
    return y


def deconv3d_loops(x, w, stride=2, pad=1, groups=1, counter=None):
    """Scatter form of transposed convolution; w (C, F/groups, k, k, k)."""
    B, C = x.shape[:2]
    Fg, k = w.shape[1], w.shape[2]
    Cg = C // groups
    out_sp = [(n - 1) * stride - 2 * pad + k for n in x.shape[2:]]
    full = np.zeros((B, Fg * groups) + tuple(n + 2 * pad for n in out_sp))
    for bi, c, iz, iy, ix in itertools.product(range(B), range(C), *map(range, x.shape[2:])):
        g = c // Cg
        for f in range(Fg):
            for kz, ky, kx in itertools.product(range(k), repeat=3):
                full[bi, g * Fg + f, iz * stride + kz, iy * stride + ky, ix * stride + kx] += \
                    x[bi, c, iz, iy, ix] * w[c, f, kz, ky, kx]
                if counter is not None:
                    counter.n += 1
    return full[:, :, pad:pad + out_sp[0], pad:pad + out_sp[1], pad:pad + out_sp[2]]


def argmax_loop(scores):
    """Per-voxel class argmax over axis 1, lowest index on ties."""
    B, K = scores.shape[:2]
    out = np.zeros((B,) + scores.shape[2:], dtype=np.int64)
    for idx in np.ndindex(out.shape):
        b, rest = idx[0], idx[1:]
        best, arg = -math.inf, 0
        for c in range(K):
            v = scores[(b, c) + rest]
            if v > best:
                best, arg = v, c
        out[idx] = arg
    return out


def confusion_loop(pred, gt, vis, num_classes):
    """Confusion matrix over the occluded (3) + surface (2) voxels."""
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    for idx in np.ndindex(pred.shape):
        if vis[idx] in (2, 3):
            m[gt[idx], pred[idx]] += 1
    return m


def metrics_from_confusion(m):
    """SC precision/recall/IoU and per-class SSC IoU (None where absent)."""
    tp = int(m[1:, 1:].sum())
    fp = int(m[0, 1:].sum())
    fn = int(m[1:, 0].sum())
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    iou = tp / (tp + fp + fn) if tp + fp + fn else 0.0
    per_class = []
    for c in range(1, m.shape[0]):
        inter = int(m[c, c])
        union = int(m[c, :].sum() + m[:, c].sum() - m[c, c])
        per_class.append(inter / union if union else None)
    return prec, rec, iou, per_class


def ftsdf_bruteforce(depth, origin, voxel_size, dims, truncation):
    """fTSDF and visibility by explicit loops over pixels and voxels.

    Surface voxels contain a back-projected pixel; distances are measured
    between voxel centers by exhaustive all-pairs search.
    """
    origin = np.asarray(origin, dtype=np.float64)
    R, t = depth.rotation, depth.translation
    D, H, W = dims
    surface = set()
    for v in range(depth.height):
        for u in range(depth.width):
            d = depth.depth[v, u]
            if d <= 0:
                continue
            cam = np.array([d * (u - depth.cx) / depth.fx, d * (v - depth.cy) / depth.fy, d])
            p = R @ cam + t
            i = np.floor((p - origin) / voxel_size).astype(int)   # x, y, z
            if 0 <= i[0] < W and 0 <= i[1] < H and 0 <= i[2] < D:
                surface.add((int(i[2]), int(i[1]), int(i[0])))
    vis = np.zeros(dims, dtype=np.uint8)
    centers = {}
    for z, y, x in itertools.product(range(D), range(H), range(W)):
        c = origin + (np.array([x, y, z]) + 0.5) * voxel_size
        centers[(z, y, x)] = c
        if (z, y, x) in surface:
            vis[z, y, x] = 2
            continue
        cam = R.T @ (c - t)
        if cam[2] <= 0:
            continue
        u = math.floor(depth.fx * cam[0] / cam[2] + depth.cx + 0.5)
        v = math.floor(depth.fy * cam[1] / cam[2] + depth.cy + 0.5)
        if not (0 <= u < depth.width and 0 <= v < depth.height):
            continue
        pd = depth.depth[v, u]
        if pd <= 0:
            continue
        vis[z, y, x] = 1 if cam[2] <= pd else 3
    out = np.zeros(dims)
    if not surface:
        return out, vis
    sc = np.array([centers[s] for s in sorted(surface)])
    for idx, c in centers.items():
        dist = min(float(np.sqrt(((sc - c) ** 2).sum(axis=1)).min()), truncation)
        sign = {0: 0.0, 1: 1.0, 2: 1.0, 3: -1.0}[int(vis[idx])]
        out[idx] = sign * (1.0 - dist / truncation)
    return out, vis


def random_depth_scene(rng, max_dim=16):
    """Random small camera + depth image + grid for fTSDF property tests."""
    from ccpnet.voxel import DepthImage, VoxelGridSpec

    dims = tuple(int(v) for v in rng.integers(4, max_dim + 1, size=3))
    size = float(rng.uniform(0.05, 0.2))
    w, h = int(rng.integers(6, 14)), int(rng.integers(5, 12))
    f = float(rng.uniform(0.6, 1.2)) * w
    # camera behind the grid looking along +Z with a small random yaw
    yaw = float(rng.uniform(-0.3, 0.3))
    R = np.array([[np.cos(yaw), 0, np.sin(yaw)], [0, 1, 0], [-np.sin(yaw), 0, np.cos(yaw)]])
    extent = np.array(dims[::-1]) * size
    t = np.array([extent[0] / 2, extent[1] / 2, -0.3 * extent[2]])
    base = float(rng.uniform(0.5, 1.3)) * extent[2]
    depth = base + rng.uniform(-0.3, 0.3, size=(h, w)) * extent[2]
    depth[rng.random((h, w)) < 0.15] = 0.0
    cam = DepthImage(np.clip(depth, 0, None), f, f, (w - 1) / 2, (h - 1) / 2, R, t)
    spec = VoxelGridSpec(origin=(0.0, 0.0, 0.0), voxel_size=size, dims=dims,
                         truncation=float(rng.uniform(2, 5)) * size)
    return cam, spec
