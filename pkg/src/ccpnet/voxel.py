"""Depth image -> fTSDF / visibility volumes, plus the on-disk formats.

Grid convention: a volume has extents (D, H, W) indexed (z, y, x); voxel
(z, y, x) has its center at ``origin + (x + .5, y + .5, z + .5) * voxel_size``
in world (X, Y, Z) meters.  Camera frame is x right, y down, z forward and
the pose maps camera coordinates to world coordinates.
"""
from __future__ import annotations

import re
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .exceptions import ConfigError, ParseError

OUTSIDE, VISIBLE_EMPTY, SURFACE, OCCLUDED = 0, 1, 2, 3
STATE_NAMES = {OUTSIDE: "outside-frustum", VISIBLE_EMPTY: "visible-empty", SURFACE: "surface", OCCLUDED: "occluded"}

VOX1_MAGIC = b"VOX1"
VOX1_HEADER = struct.Struct("<4s3IB")
VOX_F32, VOX_U8 = 0, 1


@dataclass
class DepthImage:
    depth: np.ndarray          # (height, width) meters, 0 = missing
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.depth.ndim != 2:
            raise ConfigError("depth must be a 2D array")
        if (self.depth < 0).any() or not np.isfinite(self.depth).all():
            raise ConfigError("depth values must be finite and >= 0")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ConfigError("pose rotation is not orthonormal")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True)
class VoxelGridSpec:
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    voxel_size: float = 0.02
    dims: tuple[int, int, int] = (240, 144, 240)
    truncation: float = 0.24

    def __post_init__(self):
        if self.voxel_size <= 0 or self.truncation <= 0:
            raise ConfigError("voxel_size and truncation must be positive")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"invalid grid dims {self.dims}")

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel center, shape (D, H, W, 3)."""
        D, H, W = self.dims
        z, y, x = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
        idx = np.stack([x, y, z], axis=-1).astype(np.float64)
        return np.asarray(self.origin) + (idx + 0.5) * self.voxel_size

    def voxel_of(self, points: np.ndarray):
        """(z, y, x) indices of the voxels containing ``points`` and an in-grid mask."""
        ijk = np.floor((points - np.asarray(self.origin)) / self.voxel_size).astype(np.int64)
        zyx = ijk[:, ::-1]
        inside = np.all((zyx >= 0) & (zyx < np.asarray(self.dims)), axis=1)
        return zyx, inside


# The full grid spans 4.8 x 2.88 x 4.8 m at 2 cm; desk keeps the extent at 8 cm and
# keeps the truncation at 12 voxels.  "tiny" is a 16^3 toy grid for fast tests.
GRID_PRESETS = {
    "full": VoxelGridSpec(origin=(-2.4, 0.0, 0.0), voxel_size=0.02, dims=(240, 144, 240)),
    "desk": VoxelGridSpec(origin=(-2.4, 0.0, 0.0), voxel_size=0.08, dims=(60, 36, 60), truncation=0.96),
    "tiny": VoxelGridSpec(origin=(-2.4, 0.0, 0.0), voxel_size=0.3, dims=(16, 16, 16), truncation=1.2),
}


def backproject(depth: DepthImage) -> np.ndarray:
    """World points (N, 3) of every pixel with positive depth."""
    v, u = np.nonzero(depth.depth > 0)
    d = depth.depth[v, u]
    cam = np.stack([d * (u - depth.cx) / depth.fx, d * (v - depth.cy) / depth.fy, d], axis=1)
    return cam @ depth.rotation.T + depth.translation


def project(points: np.ndarray, depth: DepthImage):
    """Continuous pixel coordinates (u, v) and camera z of world points."""
    cam = (points - depth.translation) @ depth.rotation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = depth.fx * cam[:, 0] / z + depth.cx
        v = depth.fy * cam[:, 1] / z + depth.cy
    return u, v, z


def backproject_pixels(u, v, z, depth: DepthImage) -> np.ndarray:
    cam = np.stack([z * (u - depth.cx) / depth.fx, z * (v - depth.cy) / depth.fy, z], axis=1)
    return cam @ depth.rotation.T + depth.translation


def surface_mask(depth: DepthImage, spec: VoxelGridSpec) -> np.ndarray:
    """Voxels containing at least one back-projected depth sample."""
    mask = np.zeros(spec.dims, dtype=bool)
    zyx, inside = spec.voxel_of(backproject(depth))
    zyx = zyx[inside]
    mask[zyx[:, 0], zyx[:, 1], zyx[:, 2]] = True
    return mask


def compute_visibility(depth: DepthImage, spec: VoxelGridSpec, surface: np.ndarray | None = None) -> np.ndarray:
    """Per-voxel state code: OUTSIDE, VISIBLE_EMPTY, SURFACE or OCCLUDED.

    Voxels holding a depth sample are SURFACE.  Any other voxel whose center
    projects onto a valid pixel is VISIBLE_EMPTY when its camera depth is in
    front of the observed depth and OCCLUDED behind it.  Centers behind the
    camera, off the image, or on a missing-depth pixel are OUTSIDE.
    """
    if surface is None:
        surface = surface_mask(depth, spec)
    centers = spec.voxel_centers().reshape(-1, 3)
    u, v, z = project(centers, depth)
    state = np.full(centers.shape[0], OUTSIDE, dtype=np.uint8)
    ok = z > 0
    ui = np.full(z.shape, -1, dtype=np.int64)
    vi = np.full(z.shape, -1, dtype=np.int64)
    ui[ok] = np.floor(u[ok] + 0.5).astype(np.int64)
    vi[ok] = np.floor(v[ok] + 0.5).astype(np.int64)
    ok &= (ui >= 0) & (ui < depth.width) & (vi >= 0) & (vi < depth.height)
    pd = np.zeros_like(z)
    pd[ok] = depth.depth[vi[ok], ui[ok]]
    ok &= pd > 0
    state[ok & (z <= pd)] = VISIBLE_EMPTY
    state[ok & (z > pd)] = OCCLUDED
    state = state.reshape(spec.dims)
    state[surface] = SURFACE
    return state


def ftsdf_from_state(surface: np.ndarray, visibility: np.ndarray, spec: VoxelGridSpec) -> np.ndarray:
    """sign * (1 - d / tau) with d the distance to the nearest surface voxel
    center (clamped to tau) and sign +1 free/surface, -1 occluded, 0 outside."""
    if not surface.any():
        warnings.warn("no surface samples inside the grid; fTSDF is all zeros", RuntimeWarning)
        return np.zeros(spec.dims, dtype=np.float64)
    dist = ndimage.distance_transform_edt(~surface, sampling=spec.voxel_size)
    magnitude = 1.0 - np.minimum(dist, spec.truncation) / spec.truncation
    sign = np.zeros(spec.dims, dtype=np.float64)
    sign[(visibility == VISIBLE_EMPTY) | (visibility == SURFACE)] = 1.0
    sign[visibility == OCCLUDED] = -1.0
    return sign * magnitude


def compute_ftsdf(depth: DepthImage, spec: VoxelGridSpec) -> np.ndarray:
    surface = surface_mask(depth, spec)
    return ftsdf_from_state(surface, compute_visibility(depth, spec, surface), spec)


def voxelize(depth: DepthImage, spec: VoxelGridSpec):
    """(ftsdf, visibility) for one depth image."""
    surface = surface_mask(depth, spec)
    vis = compute_visibility(depth, spec, surface)
    return ftsdf_from_state(surface, vis, spec), vis


# --- file formats ------------------------------------------------------------

def save_volume(path, volume: np.ndarray) -> None:
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ConfigError("VOX1 volumes are 3D")
    if volume.dtype == np.uint8:
        code, payload = VOX_U8, volume.tobytes()
    else:
        code, payload = VOX_F32, volume.astype("<f4").tobytes()
    Path(path).write_bytes(VOX1_HEADER.pack(VOX1_MAGIC, *volume.shape, code) + payload)


def load_volume(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < VOX1_HEADER.size:
        raise ParseError("truncated VOX1 header", path, len(data))
    magic, D, H, W, code = VOX1_HEADER.unpack_from(data)
    if magic != VOX1_MAGIC:
        raise ParseError("bad magic, expected VOX1", path, 0)
    if code not in (VOX_F32, VOX_U8):
        raise ParseError(f"unknown dtype code {code}", path, 16)
    if min(D, H, W) < 1:
        raise ParseError(f"invalid dims {(D, H, W)}", path, 4)
    dtype = np.dtype("<f4") if code == VOX_F32 else np.dtype(np.uint8)
    n = D * H * W * dtype.itemsize
    payload = data[VOX1_HEADER.size:]
    if len(payload) < n:
        raise ParseError(f"truncated payload: expected {n} bytes, got {len(payload)}", path,
                         VOX1_HEADER.size + len(payload))
    vol = np.frombuffer(payload[:n], dtype=dtype).reshape(D, H, W)
    return vol.astype(np.float32) if code == VOX_F32 else vol.copy()


def load_label_volume(path, num_classes: int = 12) -> np.ndarray:
    labels = load_volume(path)
    if labels.dtype != np.uint8:
        raise ParseError("label volume must have dtype u8", path, 16)
    bad = np.flatnonzero(labels.reshape(-1) >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise ParseError(f"label {labels.reshape(-1)[i]} >= num_classes {num_classes}", path,
                         VOX1_HEADER.size + i)
    return labels


def save_pgm(path, depth_m: np.ndarray) -> None:
    """16-bit binary PGM in millimeters (big-endian)."""
    mm = np.clip(np.round(np.asarray(depth_m) * 1000.0), 0, 65535).astype(">u2")
    h, w = mm.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + mm.tobytes())


def load_pgm(path) -> np.ndarray:
    """Depth in meters from a 16-bit P5 PGM."""
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", path, pos)
        tokens.append((data[start:pos], start))
    magic, (width, wpos), (height, hpos), (maxval, mpos) = tokens[0][0], tokens[1], tokens[2], tokens[3]
    if magic != b"P5":
        raise ParseError("bad magic, expected P5", path, 0)
    try:
        w, h, maxval_i = int(width), int(height), int(maxval)
    except ValueError as exc:
        raise ParseError(f"non-numeric PGM header field: {exc}", path, wpos) from exc
    if maxval_i != 65535:
        raise ParseError(f"expected maxval 65535, got {maxval_i}", path, mpos)
    pos += 1  # single whitespace after maxval
    n = w * h * 2
    if len(data) - pos < n:
        raise ParseError(f"truncated payload: expected {n} bytes, got {len(data) - pos}", path, len(data))
    mm = np.frombuffer(data[pos:pos + n], dtype=">u2").reshape(h, w)
    return mm.astype(np.float64) / 1000.0


_INTRINSIC = re.compile(r"\b(fx|fy|cx|cy)\s*=\s*([-+0-9.eE]+)")


def save_camera(path, depth: DepthImage) -> None:
    pose = np.hstack([depth.rotation, depth.translation[:, None]])
    lines = [f"fx={depth.fx!r} fy={depth.fy!r} cx={depth.cx!r} cy={depth.cy!r}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in pose]
    Path(path).write_text("\n".join(lines) + "\n")


def load_camera(path) -> dict:
    text = Path(path).read_text()
    intr = {k: float(v) for k, v in _INTRINSIC.findall(text)}
    missing = {"fx", "fy", "cx", "cy"} - set(intr)
    if missing:
        raise ParseError(f"camera file lacks {sorted(missing)}", path)
    rest = _INTRINSIC.sub(" ", text).split()
    try:
        pose = np.array([float(t) for t in rest], dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"non-numeric pose entry: {exc}", path) from exc
    if pose.size != 12:
        raise ParseError(f"expected 12 pose numbers, got {pose.size}", path)
    pose = pose.reshape(3, 4)
    return dict(intr, rotation=pose[:, :3], translation=pose[:, 3])


def load_depth(path, camera_path) -> DepthImage:
    return DepthImage(load_pgm(path), **load_camera(camera_path))


@dataclass
class Scene:
    """One training/evaluation scene: input encoding, labels and visibility."""

    ftsdf: np.ndarray
    labels: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        if not (self.ftsdf.shape == self.labels.shape == self.visibility.shape):
            raise ConfigError("scene volumes must share dims")

    @property
    def dims(self):
        return self.ftsdf.shape

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_volume(d / "ftsdf.vox", self.ftsdf.astype(np.float32))
        save_volume(d / "labels.vox", self.labels.astype(np.uint8))
        save_volume(d / "visibility.vox", self.visibility.astype(np.uint8))

    @classmethod
    def load(cls, directory, num_classes: int = 12) -> "Scene":
        d = Path(directory)
        return cls(load_volume(d / "ftsdf.vox"), load_label_volume(d / "labels.vox", num_classes),
                   load_label_volume(d / "visibility.vox", 4))
