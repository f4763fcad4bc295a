"""Seeded synthetic scenes: ground plane, boxes and walls seen by a camera ring."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import load_cameras, save_cameras, surround_rig
from .voxelizer import PointCloud, VoxelGridConfig, load_points, save_points_bin

INTENSITY = {"ground": 0.1, "box": 0.5, "wall": 0.8}


@dataclass
class BoxSpec:
    center: tuple  # (x, y) of the footprint center; the box stands on z = 0
    size: tuple  # (length, width, height)
    yaw: float = 0.0


@dataclass
class WallSpec:
    start: tuple  # (x, y)
    end: tuple
    height: float = 3.0


@dataclass
class SceneSpec:
    seed: int = 0
    ground_extent: float = 40.0  # half side of the square ground patch; 0 disables it
    boxes: list = field(default_factory=list)
    walls: list = field(default_factory=list)
    points_per_scene: int = 100_000
    jitter: float = 0.02
    n_cameras: int = 6
    image_size: tuple = (704, 256)
    camera_height: float = 1.6

    def __post_init__(self):
        self.boxes = [b if isinstance(b, BoxSpec) else BoxSpec(**b) for b in self.boxes]
        self.walls = [w if isinstance(w, WallSpec) else WallSpec(**w) for w in self.walls]
        if self.points_per_scene <= 0:
            raise ValueError("points_per_scene must be positive")
        if self.ground_extent < 0 or self.jitter < 0:
            raise ValueError("extents must be non-negative")
        if any(min(b.size) <= 0 for b in self.boxes) or any(w.height <= 0 for w in self.walls):
            raise ValueError("box and wall dimensions must be positive")
        if self.ground_extent == 0 and not self.boxes and not self.walls:
            raise ValueError("scene has no surfaces")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Surface:
    """Planar rectangle ``origin + s * edge_a + t * edge_b`` for s, t in [0, 1)."""

    kind: str
    origin: np.ndarray
    edge_a: np.ndarray
    edge_b: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.edge_a, self.edge_b)
        return n / np.linalg.norm(n)

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge_a, self.edge_b)))


@dataclass
class Scene:
    cloud: PointCloud
    cameras: list
    surfaces: list
    labels: np.ndarray  # surface index per point
    spec: SceneSpec


def _box_surfaces(box: BoxSpec) -> list:
    l, w, h = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    ax = np.array([c, s, 0.0]) * l
    ay = np.array([-s, c, 0.0]) * w
    up = np.array([0.0, 0.0, h])
    corner = np.array([box.center[0], box.center[1], 0.0]) - ax / 2 - ay / 2
    return [
        Surface("box", corner + up, ax, ay),  # top
        Surface("box", corner, ax, up),
        Surface("box", corner + ay, up, ax),
        Surface("box", corner, up, ay),
        Surface("box", corner + ax, ay, up),
    ]


def scene_surfaces(spec: SceneSpec) -> list:
    out = []
    e = spec.ground_extent
    if e > 0:
        out.append(Surface("ground", np.array([-e, -e, 0.0]), np.array([2 * e, 0.0, 0.0]), np.array([0.0, 2 * e, 0.0])))
    for box in spec.boxes:
        out.extend(_box_surfaces(box))
    for wall in spec.walls:
        a = np.array([*wall.start, 0.0])
        b = np.array([*wall.end, 0.0])
        out.append(Surface("wall", a, b - a, np.array([0.0, 0.0, wall.height])))
    return out


def generate_scene(spec: SceneSpec) -> Scene:
    """Area-weighted surface sampling with uniform jitter along each surface normal."""
    rng = np.random.default_rng(spec.seed)
    surfaces = scene_surfaces(spec)
    areas = np.array([s.area for s in surfaces])
    counts = rng.multinomial(spec.points_per_scene, areas / areas.sum())
    xyz, inten, labels = [], [], []
    for i, (surf, n) in enumerate(zip(surfaces, counts)):
        st = rng.random((n, 2))
        off = spec.jitter * (2.0 * rng.random(n) - 1.0)
        xyz.append(surf.origin + st[:, :1] * surf.edge_a + st[:, 1:] * surf.edge_b + off[:, None] * surf.normal)
        inten.append(np.full(n, INTENSITY[surf.kind]))
        labels.append(np.full(n, i, dtype=np.int64))
    pts = np.concatenate([np.concatenate(xyz), np.concatenate(inten)[:, None]], axis=1)
    cams = surround_rig(spec.n_cameras, spec.camera_height, tuple(spec.image_size))
    return Scene(PointCloud(pts), cams, surfaces, np.concatenate(labels), spec)


def wall_scene(spec: SceneSpec | None = None) -> Scene:
    """Canonical fixture: a lone 3 m wall 10 m in front of camera 0, no ground."""
    base = spec or SceneSpec()
    s = SceneSpec(
        seed=base.seed,
        ground_extent=0.0,
        walls=[WallSpec((10.0, -4.0), (10.0, 4.0), 3.0)],
        points_per_scene=base.points_per_scene,
        jitter=base.jitter,
        n_cameras=base.n_cameras,
        image_size=base.image_size,
        camera_height=base.camera_height,
    )
    return generate_scene(s)


def street_spec(seed: int, points_per_scene: int = 24_000, n_boxes: int = 12) -> SceneSpec:
    """Seeded clutter: ground, randomly placed boxes and two walls.

    The default budget voxelizes to roughly 20k tokens on the default grid.
    """
    rng = np.random.default_rng([seed, 7])
    boxes = [
        BoxSpec(tuple(rng.uniform(-30, 30, 2)), tuple(rng.uniform([1.5, 1.5, 1.2], [5.0, 3.0, 3.0])),
                float(rng.uniform(0, math.pi)))
        for _ in range(n_boxes)
    ]
    walls = [WallSpec((15.0, -10.0), (15.0, 10.0), 3.0), WallSpec((-20.0, 5.0), (-20.0, 25.0), 4.0)]
    return SceneSpec(seed=seed, ground_extent=40.0, boxes=boxes, walls=walls, points_per_scene=points_per_scene)


def uniform_voxel_cloud(seed: int, n_tokens: int, grid: VoxelGridConfig | None = None) -> PointCloud:
    """One point in each of ``n_tokens`` distinct uniformly drawn voxels."""
    grid = grid or VoxelGridConfig()
    rng = np.random.default_rng(seed)
    dims = grid.dims
    lin = rng.choice(int(np.prod(dims)), size=n_tokens, replace=False)
    idx = np.stack(np.unravel_index(lin, tuple(dims)), axis=1)
    xyz = grid.origin + (idx + 0.1 + 0.8 * rng.random((n_tokens, 3))) * grid.cell_size
    return PointCloud(np.concatenate([xyz, rng.random((n_tokens, 1))], axis=1))


def save_scene(scene: Scene, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_points_bin(scene.cloud, out / "points.bin")
    save_cameras(scene.cameras, out / "cameras.json")
    (out / "scene.json").write_text(json.dumps(scene.spec.to_dict(), indent=2))


def load_scene(scene_dir):
    """Returns (PointCloud, cameras) from a directory written by save_scene."""
    d = Path(scene_dir)
    cloud_path = d / "points.bin" if (d / "points.bin").exists() else d / "points.csv"
    if not cloud_path.exists():
        raise FileNotFoundError(f"{d}: no points.bin or points.csv")
    return load_points(cloud_path), load_cameras(d / "cameras.json")
