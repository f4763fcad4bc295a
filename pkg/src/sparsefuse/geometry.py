"""Pinhole camera model and the world/camera/pixel mappings.

Conventions used throughout the package:

* World (LiDAR) frame: x forward, y left, z up, meters.
* Camera frame: x right, y down, z along the optical axis.
* ``CameraModel.rotation`` is the row-major 3x3 world->camera matrix R and
  ``translation`` is t, so ``p_cam = R @ p_world + t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MIN_DEPTH = 1e-4  # meters; nearer points are treated as behind the camera


class BehindCamera(ValueError):
    """Point has camera-frame depth <= MIN_DEPTH."""


class OutOfFrame(ValueError):
    """Point projects outside ``[0, width) x [0, height)``."""


@dataclass(frozen=True)
class PixelCoord:
    u: float
    v: float
    depth: float


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 704
    height: int = 256

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("non-finite extrinsics")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["translation"], dtype=np.float64),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def rotation_z(angle: float) -> np.ndarray:
    """Active rotation by ``angle`` radians about +z."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def look_along(yaw: float, position=(0.0, 0.0, 0.0), intrinsics=None, size=(704, 256)) -> CameraModel:
    """Level camera at ``position`` whose optical axis points along world yaw ``yaw``.

    ``intrinsics`` is ``(fx, fy, cx, cy)``; defaults to a 560 px focal length
    with the principal point at the image center.
    """
    width, height = size
    if intrinsics is None:
        intrinsics = (560.0, 560.0, width / 2.0, height / 2.0)
    fx, fy, cx, cy = intrinsics
    c, s = math.cos(yaw), math.sin(yaw)
    forward = np.array([c, s, 0.0])
    right = np.array([s, -c, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    rot = np.stack([right, down, forward])
    trans = -rot @ np.asarray(position, dtype=np.float64)
    return CameraModel(fx, fy, cx, cy, rot, trans, width, height)


def surround_rig(n_cameras: int = 6, height: float = 1.6, size=(704, 256), focal: float = 560.0) -> list[CameraModel]:
    """Ring of level cameras at equal yaw spacing, camera 0 facing +x."""
    width, h = size
    return [
        look_along(2 * math.pi * k / n_cameras, (0.0, 0.0, height), (focal, focal, width / 2.0, h / 2.0), size)
        for k in range(n_cameras)
    ]


def world_to_camera(p, cam: CameraModel) -> np.ndarray:
    """``R @ p + t``; accepts a single point or an (N, 3) array."""
    p = np.asarray(p, dtype=np.float64)
    return p @ cam.rotation.T + cam.translation


def project_to_pixel(p_world, cam: CameraModel) -> PixelCoord:
    """Project one world point. Raises BehindCamera or OutOfFrame."""
    x, y, z = world_to_camera(p_world, cam)
    if z <= MIN_DEPTH:
        raise BehindCamera(f"depth {z:.6g} <= {MIN_DEPTH}")
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        raise OutOfFrame(f"pixel ({u:.3f}, {v:.3f}) outside {cam.width}x{cam.height}")
    return PixelCoord(float(u), float(v), float(z))


def unproject_pixel(px: PixelCoord, cam: CameraModel) -> np.ndarray:
    """World point that projects to ``px`` (inverse of project_to_pixel)."""
    return unproject_points(np.array([px.u]), np.array([px.v]), np.array([px.depth]), cam)[0]


# Status codes returned by project_points.
VISIBLE = 0
BEHIND = 1
OUT_OF_FRAME = 2


def project_points(points: np.ndarray, cam: CameraModel):
    """Vectorized projection.

    Returns ``(uv, depth, status)`` where ``uv`` is (N, 2), ``depth`` is the
    camera-frame z and ``status`` holds VISIBLE / BEHIND / OUT_OF_FRAME per
    point. ``uv`` is NaN for points behind the camera.
    """
    pc = world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3), cam)
    depth = pc[:, 2]
    status = np.full(len(pc), VISIBLE, dtype=np.int8)
    behind = depth <= MIN_DEPTH
    status[behind] = BEHIND
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(behind, np.nan, depth)
        u = cam.fx * pc[:, 0] / safe + cam.cx
        v = cam.fy * pc[:, 1] / safe + cam.cy
    inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    status[~behind & ~inside] = OUT_OF_FRAME
    return np.stack([u, v], axis=1), depth, status


def unproject_points(u, v, depth, cam: CameraModel) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    x = (np.asarray(u, dtype=np.float64) - cam.cx) / cam.fx * depth
    y = (np.asarray(v, dtype=np.float64) - cam.cy) / cam.fy * depth
    pc = np.stack([x, y, depth], axis=-1)
    return (pc - cam.translation) @ cam.rotation


def save_cameras(cams, path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cams], indent=2))


def load_cameras(path) -> list[CameraModel]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data["cameras"]
    return [CameraModel.from_dict(d) for d in data]
