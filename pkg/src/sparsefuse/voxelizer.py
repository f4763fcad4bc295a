"""Voxel and pillar tokenization of LiDAR point clouds."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tokens import TokenSet

RAW_FEATURES = ("x_offset", "y_offset", "z_offset", "intensity")


class EmptyCloud(ValueError):
    """No point of the cloud falls inside the grid range."""


@dataclass
class PointCloud:
    """(N, 4) array of x, y, z, intensity."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite values")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass(frozen=True)
class VoxelGridConfig:
    range_min: tuple = (-54.0, -54.0, -2.1)
    range_max: tuple = (54.0, 54.0, 5.9)
    voxel_size: tuple = (0.3, 0.3, 0.25)
    pillar_mode: bool = False

    def __post_init__(self):
        lo = np.asarray(self.range_min, dtype=np.float64)
        hi = np.asarray(self.range_max, dtype=np.float64)
        size = np.asarray(self.voxel_size, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,) or size.shape != (3,):
            raise ValueError("range and voxel size must have three components")
        if np.any(hi <= lo):
            raise ValueError("range_max must exceed range_min on every axis")
        if np.any(size <= 0):
            raise ValueError("voxel sizes must be positive")

    @property
    def origin(self) -> np.ndarray:
        return np.asarray(self.range_min, dtype=np.float64)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.range_max, dtype=np.float64) - self.origin

    @property
    def cell_size(self) -> np.ndarray:
        size = np.asarray(self.voxel_size, dtype=np.float64).copy()
        if self.pillar_mode:
            size[2] = self.extent[2]
        return size

    @property
    def dims(self) -> np.ndarray:
        """Cells per axis (a partial trailing cell counts as a cell)."""
        return np.ceil(self.extent / self.cell_size - 1e-9).astype(np.int64)

    def as_pillars(self) -> "VoxelGridConfig":
        return VoxelGridConfig(self.range_min, self.range_max, self.voxel_size, True)

    def cell_size_at(self, level_z: int) -> np.ndarray:
        """Cell size after the z axis has been pooled down to ``level_z`` cells."""
        size = self.cell_size.copy()
        size[2] = self.extent[2] / level_z
        return size

    def centers(self, indices: np.ndarray, level_z: int | None = None) -> np.ndarray:
        size = self.cell_size if level_z is None else self.cell_size_at(level_z)
        return self.origin + (np.asarray(indices) + 0.5) * size


def quantize(xyz: np.ndarray, cfg: VoxelGridConfig):
    """Floor-quantize points; returns (indices, in-range mask)."""
    idx = np.floor((xyz - cfg.origin) / cfg.cell_size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < cfg.dims) & (xyz < np.asarray(cfg.range_max)), axis=1)
    return idx, inside


def _reduce(cloud: PointCloud, cfg: VoxelGridConfig) -> TokenSet:
    idx, inside = quantize(cloud.xyz, cfg)
    n_dropped = int(np.count_nonzero(~inside))
    if not inside.any():
        raise EmptyCloud(f"none of {len(cloud)} points fall inside the grid range")
    idx = idx[inside]
    pts = cloud.points[inside]
    nx, ny, nz = (int(d) for d in cfg.dims)
    key = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
    uniq, inverse = np.unique(key, return_inverse=True)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    vox = np.stack([uniq // (ny * nz), (uniq // nz) % ny, uniq % nz], axis=1)
    centers = cfg.centers(vox)
    offsets = pts[:, :3] - centers[inverse]
    feats = np.empty((len(uniq), 4))
    for c in range(3):
        feats[:, c] = np.bincount(inverse, weights=offsets[:, c], minlength=len(uniq)) / counts
    feats[:, 3] = np.bincount(inverse, weights=pts[:, 3], minlength=len(uniq)) / counts
    return TokenSet(
        coords=centers,
        features=feats,
        indices=vox,
        level_z=nz,
        grid=cfg,
        info={"points_in": len(cloud), "points_dropped": n_dropped, "points_per_token": counts},
    )


def voxelize(cloud: PointCloud, cfg: VoxelGridConfig) -> TokenSet:
    """One token per non-empty voxel with mean (offset from center, intensity) features.

    Tokens come out in ascending linear voxel index, so the result does not
    depend on input point order. Raises EmptyCloud when nothing is in range.
    """
    return _reduce(cloud, cfg)


def pillarize(cloud: PointCloud, cfg: VoxelGridConfig) -> TokenSet:
    """Like voxelize with the z axis collapsed to a single cell.

    Pillar anchors sit at the z midpoint of the grid range.
    """
    return _reduce(cloud, cfg if cfg.pillar_mode else cfg.as_pillars())


def save_points_bin(cloud: PointCloud, path) -> None:
    """u32 little-endian count, then float32 (x, y, z, intensity) records."""
    data = np.ascontiguousarray(cloud.points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(data)))
        fh.write(data.tobytes())


def load_points_bin(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated header")
    (count,) = struct.unpack_from("<I", raw, 0)
    if len(raw) != 4 + 16 * count:
        raise ValueError(f"{path}: expected {count} records, got {(len(raw) - 4) / 16:g}")
    return PointCloud(np.frombuffer(raw, dtype="<f4", offset=4).reshape(count, 4).astype(np.float64))


def load_points_csv(path) -> PointCloud:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header != ["x", "y", "z", "intensity"]:
            raise ValueError(f"{path}: header must be x,y,z,intensity, got {header}")
        rows = [[float(v) for v in row] for row in reader if row]
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 4))


def load_points(path) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_points_csv(path)
    return load_points_bin(path)
