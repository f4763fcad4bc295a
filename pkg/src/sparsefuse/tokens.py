"""Token containers shared by every stage of the fusion path."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional

import numpy as np

from .geometry import PixelCoord


class Modality(IntEnum):
    LIDAR = 0
    IMAGE = 1


@dataclass(frozen=True)
class Token:
    """Single fused-space element (a row view of a TokenSet)."""

    coord3d: Optional[np.ndarray]
    pixel: Optional[PixelCoord]
    modality: Modality
    camera_id: Optional[int]
    feature: np.ndarray


@dataclass
class TokenSet:
    """Struct-of-arrays token storage.

    ``coords`` are metric anchors (voxel centers for LiDAR tokens, lifted
    points for image tokens; NaN rows when absent). ``indices`` are integer
    grid indices for voxel tokens. ``pixels`` holds (u, v, depth) per token
    or NaN.
    """

    coords: np.ndarray
    features: np.ndarray
    indices: Optional[np.ndarray] = None
    modality: Optional[np.ndarray] = None
    camera_id: Optional[np.ndarray] = None
    pixels: Optional[np.ndarray] = None
    level_z: int = 1
    grid: object = None  # VoxelGridConfig for voxel tokens
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.coords)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(n, 3)
        feats = np.asarray(self.features, dtype=np.float64)
        self.features = feats.reshape(n, feats.shape[-1] if feats.ndim == 2 else -1)
        if self.modality is None:
            self.modality = np.full(n, Modality.LIDAR, dtype=np.int8)
        if self.camera_id is None:
            self.camera_id = np.full(n, -1, dtype=np.int64)
        if self.pixels is None:
            self.pixels = np.full((n, 3), np.nan)
        if self.level_z < 1:
            raise ValueError("level_z must be positive")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __getitem__(self, i: int) -> Token:
        px = self.pixels[i]
        cam = int(self.camera_id[i])
        c = self.coords[i]
        return Token(
            coord3d=None if np.isnan(c).any() else c.copy(),
            pixel=None if np.isnan(px).any() else PixelCoord(*map(float, px)),
            modality=Modality(int(self.modality[i])),
            camera_id=None if cam < 0 else cam,
            feature=self.features[i].copy(),
        )

    def with_features(self, features: np.ndarray) -> "TokenSet":
        if features.shape[0] != len(self):
            raise ValueError("feature row count mismatch")
        return replace(self, features=features, info=dict(self.info))

    def subset(self, idx) -> "TokenSet":
        idx = np.asarray(idx)
        return replace(
            self,
            coords=self.coords[idx],
            features=self.features[idx],
            indices=None if self.indices is None else self.indices[idx],
            modality=self.modality[idx],
            camera_id=self.camera_id[idx],
            pixels=self.pixels[idx],
            info=dict(self.info),
        )
