"""End-to-end sparse camera-LiDAR fusion path.

tokenizer -> fusion stages (3D-to-2D in pixel space, 2D-to-3D via lifted
image patches) with attentive z-pooling in between -> dense BEV grid.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .attention import (
    ModelConfig,
    attentive_pool_z,
    init_layer_weights,
    make_rng,
    positional_encoding,
    transformer_layer,
)
from .partition import CURVE_BITS, PATTERNS, PartitionConfig, build_plan, window_keys
from .tokens import Modality, TokenSet
from .voxelizer import PointCloud, VoxelGridConfig, pillarize, voxelize

FUSION_ORDERS = ("3d_to_2d_first", "2d_to_3d_first", "3d_to_2d_only", "2d_to_3d_only")
LIDAR_PROJECTIONS = ("voxel", "pillar")
IMAGE_PROJECTIONS = ("partial", "nearest")

_ORDER_ALIASES = {
    "threedtotwodfirst": "3d_to_2d_first",
    "twodtothreedfirst": "2d_to_3d_first",
    "threedtotwodonly": "3d_to_2d_only",
    "twodtothreedonly": "2d_to_3d_only",
}
_IMAGE_ALIASES = {"partialprojection": "partial", "nearestneighbor": "nearest", "nearest_neighbor": "nearest"}

STAGE_KINDS = {
    "3d_to_2d_first": ("3d_to_2d", "2d_to_3d"),
    "2d_to_3d_first": ("2d_to_3d", "3d_to_2d"),
    "3d_to_2d_only": ("3d_to_2d", "3d_to_2d"),
    "2d_to_3d_only": ("2d_to_3d", "2d_to_3d"),
}


class NoIncidence(ValueError):
    """Partial projection found no LiDAR point on any image patch."""


class LevelMismatch(ValueError):
    """BEV densification requested before z was pooled down to one cell."""


def _norm(value: str, allowed, aliases) -> str:
    v = value.lower().replace("-", "_")
    v = aliases.get(v.replace("_", ""), v)
    if v not in allowed:
        raise ValueError(f"{value!r} not one of {allowed}")
    return v


@dataclass(frozen=True)
class PipelineConfig:
    grid: VoxelGridConfig = field(default_factory=VoxelGridConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    layers_per_stage: int = 4
    fusion_order: str = "3d_to_2d_first"
    lidar_projection: str = "voxel"
    image_projection: str = "partial"
    z_schedule: tuple = (32, 8, 2, 1)
    pixel_window: tuple = (8, 8)  # in patches
    patch_stride: int = 8
    image_grid: tuple = (32, 88)  # rows, cols of patch tokens per camera

    def __post_init__(self):
        object.__setattr__(self, "fusion_order", _norm(self.fusion_order, FUSION_ORDERS, _ORDER_ALIASES))
        object.__setattr__(self, "lidar_projection", _norm(self.lidar_projection, LIDAR_PROJECTIONS, {}))
        object.__setattr__(self, "image_projection", _norm(self.image_projection, IMAGE_PROJECTIONS, _IMAGE_ALIASES))
        object.__setattr__(self, "z_schedule", tuple(int(z) for z in self.z_schedule))
        if self.layers_per_stage not in (2, 4, 8):
            raise ValueError("layers_per_stage must be 2, 4 or 8")
        zs = self.z_schedule
        if len(zs) != 4:
            raise ValueError("z_schedule needs one level per stage: tokenizer, two fusion stages, head")
        if any(b >= a or a % b for a, b in zip(zs, zs[1:])) or zs[-1] != 1:
            raise ValueError("z_schedule must strictly decrease, each level dividing its predecessor, ending at 1")
        if self.lidar_projection == "voxel" and int(self.grid.dims[2]) != zs[0]:
            raise ValueError(f"grid has {int(self.grid.dims[2])} z cells but z_schedule starts at {zs[0]}")

    @property
    def levels(self) -> tuple:
        return (1, 1, 1, 1) if self.lidar_projection == "pillar" else self.z_schedule

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "grid" in d:
            d["grid"] = VoxelGridConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["grid"].items()})
        if "partition" in d:
            p = dict(d["partition"])
            if "window_shape" in p:
                p["window_shape"] = tuple(p["window_shape"])
            d["partition"] = PartitionConfig(**p)
        if "model" in d:
            d["model"] = ModelConfig(**d["model"])
        for key in ("z_schedule", "pixel_window", "image_grid"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, model=replace(self.model, seed=int(seed)))


@dataclass
class ImageTokenGrid:
    camera_id: int
    features: np.ndarray  # (rows * cols, dim), row-major patches
    rows: int
    cols: int
    stride: int

    def patch_centers(self) -> np.ndarray:
        r, c = np.divmod(np.arange(self.rows * self.cols), self.cols)
        return np.stack([(c + 0.5) * self.stride, (r + 0.5) * self.stride], axis=1)

    def patch_of(self, uv: np.ndarray) -> np.ndarray:
        col = np.clip(np.floor(uv[:, 0] / self.stride).astype(np.int64), 0, self.cols - 1)
        row = np.clip(np.floor(uv[:, 1] / self.stride).astype(np.int64), 0, self.rows - 1)
        return row * self.cols + col


class FusionModel:
    """Seeded weights for every stage of a PipelineConfig."""

    def __init__(self, cfg: PipelineConfig, zero_outputs: bool = False):
        self.cfg = cfg
        m = cfg.model
        rng = make_rng(m.seed, 2)
        self.lift = rng.uniform(-0.5, 0.5, size=(4, m.dim))
        self.stages = []
        for s in range(3):
            layers = [init_layer_weights(m, s, l) for l in range(cfg.layers_per_stage)]
            if zero_outputs:
                layers = [w.zero_output_projections() for w in layers]
            self.stages.append(layers)
        self.pool_scores = [make_rng(m.seed, 4, i).normal(size=m.dim) / np.sqrt(m.dim) for i in range(3)]
        self.zero_outputs = zero_outputs

    def image_projection(self, n_cameras: int) -> np.ndarray:
        rng = make_rng(self.cfg.model.seed, 3, n_cameras)
        fan_in = 3 + n_cameras
        return rng.uniform(-1, 1, size=(fan_in, self.cfg.model.dim)) / np.sqrt(fan_in)


def _texture(u: np.ndarray, v: np.ndarray, cam: int) -> np.ndarray:
    return 0.5 + 0.5 * np.sin(0.05 * u + 0.07 * v + 1.3 * cam)


def make_image_grids(cams, cfg: PipelineConfig, model: FusionModel) -> list:
    """Deterministic stand-in for an image backbone.

    Patch feature = seeded linear map of (u / width, v / height, camera
    one-hot, mean texture over the patch's pixels).
    """
    rows, cols = cfg.image_grid
    stride = cfg.patch_stride
    proj = model.image_projection(len(cams))
    sub = np.arange(stride) + 0.5
    grids = []
    for cid, cam in enumerate(cams):
        grid = ImageTokenGrid(cid, np.zeros((rows * cols, cfg.model.dim)), rows, cols, stride)
        centers = grid.patch_centers()
        corner = centers - stride / 2
        pu = corner[:, 0, None, None] + sub[None, None, :]
        pv = corner[:, 1, None, None] + sub[None, :, None]
        tex = _texture(pu, pv, cid).mean(axis=(1, 2))
        onehot = np.zeros((len(centers), len(cams)))
        onehot[:, cid] = 1.0
        inputs = np.column_stack([centers[:, 0] / cam.width, centers[:, 1] / cam.height, onehot, tex])
        grid.features = inputs @ proj
        grids.append(grid)
    return grids


def _stage_pe(points: np.ndarray, window, cfg: PipelineConfig) -> np.ndarray:
    if cfg.model.pe_style == "pe3d":
        return positional_encoding(points, cfg.model)
    _, local = window_keys(points, PartitionConfig(tuple(window), cfg.partition.group_size))
    return positional_encoding(local, cfg.model)


def _run_layers(x, points, window, layers, cfg: PipelineConfig, lattice=None, pos=None, workers=1):
    """Run a stack of layers, cycling the four partition patterns.

    ``lattice`` = (indices, window_cells) lets LiDAR-only stages partition on
    integer grid indices; otherwise ``points`` are used directly (and
    floor-quantized for curve partitioning).
    """
    base = replace(cfg.partition, window_shape=tuple(float(w) for w in window))
    for i, w in enumerate(layers):
        pcfg = base.with_pattern(PATTERNS[i % 4])
        if lattice is not None:
            idx, cells = lattice
            plan = build_plan(idx, replace(pcfg, window_shape=tuple(float(c) for c in cells)), cells)
        elif pcfg.algorithm == "curve":
            plan = build_plan(_lattice_for_curve(points, cfg, window), pcfg, None)
        else:
            plan = build_plan(points, pcfg)
        x = transformer_layer(x, plan, w, cfg.model, workers, pos=pos)
    return x


def _lattice_for_curve(points, cfg: PipelineConfig, window):
    """Integer cells for curve sorting of arbitrary points; one cell = 1/16 window."""
    cell = np.asarray(window, dtype=np.float64) / 16.0
    idx = np.floor((points - points.min(axis=0)) / cell).astype(np.int64)
    return np.clip(idx, 0, (1 << CURVE_BITS) - 1)


def _lidar_lattice(tokens: TokenSet, cfg: PipelineConfig):
    """(indices, window in cells) if the 3D window tiles the grid at this level."""
    if tokens.indices is None or tokens.grid is None:
        return None
    cell = tokens.grid.cell_size_at(tokens.level_z)
    cells = np.asarray(cfg.partition.window_shape, dtype=np.float64) / cell
    cells = np.minimum(cells, [np.inf, np.inf, tokens.level_z])
    if np.any(np.abs(cells - np.round(cells)) > 1e-6):
        return None
    return tokens.indices, np.round(cells).astype(np.int64)


def tokenize_lidar(cloud: PointCloud, cfg: PipelineConfig, model: Optional[FusionModel] = None, workers: int = 1) -> TokenSet:
    """Voxelize (or pillarize), lift to ``dim``, add PE, run the tokenizer layers."""
    model = model or FusionModel(cfg)
    raw = pillarize(cloud, cfg.grid) if cfg.lidar_projection == "pillar" else voxelize(cloud, cfg.grid)
    x = raw.features @ model.lift
    x = x + _stage_pe(raw.coords, cfg.partition.window_shape, cfg)
    x = _run_layers(x, raw.coords, cfg.partition.window_shape, model.stages[0], cfg, _lidar_lattice(raw, cfg), workers=workers)
    return raw.with_features(x)


@dataclass
class CameraHits:
    token_index: np.ndarray
    uv: np.ndarray
    depth: np.ndarray


@dataclass
class Projection:
    per_camera: list
    behind: int = 0
    out_of_frame: int = 0
    unseen: int = 0

    def drops(self) -> dict:
        return {"behind_camera": self.behind, "out_of_frame": self.out_of_frame, "unseen_tokens": self.unseen}


def project_tokens_3d_to_2d(lidar: TokenSet, cams) -> Projection:
    """Project every token anchor into every camera; drops are counted per cause."""
    per_camera, behind, oof = [], 0, 0
    seen = np.zeros(len(lidar), dtype=bool)
    for cam in cams:
        uv, depth, status = geometry.project_points(lidar.coords, cam)
        ok = status == geometry.VISIBLE
        behind += int(np.count_nonzero(status == geometry.BEHIND))
        oof += int(np.count_nonzero(status == geometry.OUT_OF_FRAME))
        seen |= ok
        idx = np.flatnonzero(ok)
        per_camera.append(CameraHits(idx, uv[idx], depth[idx]))
    return Projection(per_camera, behind, oof, int(np.count_nonzero(~seen)))


def fuse_in_pixel_space(lidar_features: np.ndarray, projection: Projection, grids: list, cfg: PipelineConfig,
                        layers, workers: int = 1):
    """Per camera, attend image patches jointly with the LiDAR tokens landing on it.

    Returns (new LiDAR features, new per-camera image features). LiDAR tokens
    seen by several cameras receive the mean of their per-camera results,
    reduced in camera-id order; unseen tokens are untouched.
    """
    acc = np.zeros_like(lidar_features)
    hits = np.zeros(len(lidar_features))
    new_image = []
    window = (cfg.pixel_window[0] * cfg.patch_stride, cfg.pixel_window[1] * cfg.patch_stride, 1.0)
    for grid, cam_hits in zip(grids, projection.per_camera):
        n_img = len(grid.features)
        x = np.concatenate([grid.features, lidar_features[cam_hits.token_index]])
        uv = np.concatenate([grid.patch_centers(), cam_hits.uv])
        points = np.column_stack([uv, np.zeros(len(uv))])
        pos = _stage_pe(points, window, cfg)
        x = _run_layers(x, points, window, layers, cfg, pos=pos, workers=workers)
        new_image.append(x[:n_img])
        acc[cam_hits.token_index] += x[n_img:]
        hits[cam_hits.token_index] += 1
    out = lidar_features.copy()
    seen = hits > 0
    out[seen] = acc[seen] / hits[seen, None]
    return out, new_image


def partial_project_2d_to_3d(grids: list, projection: Projection, cams, cfg: PipelineConfig) -> TokenSet:
    """Lift image patches to 3D using LiDAR depth.

    Partial projection lifts a patch only when at least one projected point
    lands on it, at the smallest such depth. Nearest-neighbor lifts every
    patch with the depth of the closest projected point in pixel distance.
    The returned tokens carry (camera, row, col) in ``indices``.
    """
    coords, feats, pixels, cam_ids, where = [], [], [], [], []
    total_incident = 0
    for grid, hits, cam in zip(grids, projection.per_camera, cams):
        n_patch = grid.rows * grid.cols
        centers = grid.patch_centers()
        if len(hits.depth) == 0:
            continue
        if cfg.image_projection == "partial":
            depth = np.full(n_patch, np.inf)
            np.minimum.at(depth, grid.patch_of(hits.uv), hits.depth)
            lifted = np.flatnonzero(np.isfinite(depth))
            total_incident += len(lifted)
            d = depth[lifted]
        else:
            _, nearest = cKDTree(hits.uv).query(centers)
            lifted = np.arange(n_patch)
            d = hits.depth[nearest]
            total_incident += len(hits.depth)
        if len(lifted) == 0:
            continue
        uv = centers[lifted]
        coords.append(geometry.unproject_points(uv[:, 0], uv[:, 1], d, cam))
        feats.append(grid.features[lifted])
        pixels.append(np.column_stack([uv, d]))
        cam_ids.append(np.full(len(lifted), grid.camera_id))
        row, col = np.divmod(lifted, grid.cols)
        where.append(np.column_stack([np.full(len(lifted), grid.camera_id), row, col]))
    if cfg.image_projection == "partial" and total_incident == 0:
        raise NoIncidence("no LiDAR token projects onto any image patch")
    n_total = sum(g.rows * g.cols for g in grids)
    dim = grids[0].features.shape[1] if grids else cfg.model.dim
    if not coords:
        return TokenSet(np.zeros((0, 3)), np.zeros((0, dim)), indices=np.zeros((0, 3), np.int64),
                        modality=np.zeros(0, np.int8), info={"lift_fraction": 0.0, "patches": n_total})
    lifted_tokens = TokenSet(
        coords=np.concatenate(coords),
        features=np.concatenate(feats),
        indices=np.concatenate(where).astype(np.int64),
        modality=np.full(sum(len(c) for c in coords), Modality.IMAGE, dtype=np.int8),
        camera_id=np.concatenate(cam_ids).astype(np.int64),
        pixels=np.concatenate(pixels),
    )
    lifted_tokens.info = {"lift_fraction": len(lifted_tokens) / n_total, "patches": n_total}
    return lifted_tokens


def fuse_in_3d_space(lidar: TokenSet, image: TokenSet, cfg: PipelineConfig, layers, workers: int = 1):
    """Joint 3D-windowed attention over LiDAR tokens and lifted image tokens.

    Returns (new LiDAR features, new image-token features).
    """
    n = len(lidar)
    if len(image) == 0:
        lattice = _lidar_lattice(lidar, cfg)
        x = _run_layers(lidar.features, lidar.coords, cfg.partition.window_shape, layers, cfg, lattice,
                        pos=_stage_pe(lidar.coords, cfg.partition.window_shape, cfg), workers=workers)
        return x, image.features.copy()
    points = np.concatenate([lidar.coords, image.coords])
    x = np.concatenate([lidar.features, image.features])
    pos = _stage_pe(points, cfg.partition.window_shape, cfg)
    x = _run_layers(x, points, cfg.partition.window_shape, layers, cfg, pos=pos, workers=workers)
    return x[:n], x[n:]


def densify_bev(lidar: TokenSet, grid: Optional[VoxelGridConfig] = None) -> np.ndarray:
    """Scatter tokens into a dense (nx, ny, dim) grid; empty cells are exact zeros."""
    if lidar.level_z != 1:
        raise LevelMismatch(f"level_z is {lidar.level_z}, expected 1")
    grid = grid or lidar.grid
    nx, ny = (int(d) for d in grid.dims[:2])
    bev = np.zeros((nx, ny, lidar.dim))
    if len(lidar):
        bev[lidar.indices[:, 0], lidar.indices[:, 1]] = lidar.features
    return bev


@dataclass
class PipelineResult:
    stats: dict
    bev: np.ndarray
    lidar: TokenSet

    def deterministic_stats(self) -> dict:
        return {k: v for k, v in self.stats.items() if k != "timings_ns"}


def run_pipeline(cloud: PointCloud, cams, cfg: PipelineConfig, model: Optional[FusionModel] = None,
                 workers: int = 1) -> PipelineResult:
    """Tokenizer, two fusion stages in ``fusion_order`` with z pooling between, then BEV."""
    model = model or FusionModel(cfg)
    levels = cfg.levels
    timings: dict = {}
    stages: list = []

    def tick():
        return time.perf_counter_ns()

    t0 = tick()
    lidar = tokenize_lidar(cloud, cfg, model, workers)
    timings["tokenizer"] = tick() - t0
    stages.append({"name": "tokenizer", "level_z": lidar.level_z, "lidar_tokens_in": len(lidar),
                   "lidar_tokens_out": len(lidar), "points_dropped": int(lidar.info.get("points_dropped", 0))})
    grids = make_image_grids(cams, cfg, model)
    pools = []
    kinds = STAGE_KINDS[cfg.fusion_order]
    for s, kind in enumerate(kinds):
        lidar, pool_info = _pool(lidar, levels[s], levels[s + 1], model.pool_scores[s])
        pools.append(pool_info)
        name = kind if kind not in kinds[:s] else f"{kind}#2"
        n_in = len(lidar)
        record = {"name": name, "level_z": lidar.level_z, "lidar_tokens_in": n_in}
        t0 = tick()
        projection = project_tokens_3d_to_2d(lidar, cams)
        record["drops"] = projection.drops()
        layers = model.stages[s + 1]
        if kind == "3d_to_2d":
            feats, image_feats = fuse_in_pixel_space(lidar.features, projection, grids, cfg, layers, workers)
            for grid, f in zip(grids, image_feats):
                grid.features = f
            record["image_tokens"] = int(sum(len(g.features) for g in grids))
        else:
            lifted = partial_project_2d_to_3d(grids, projection, cams, cfg)
            feats, image_feats = fuse_in_3d_space(lidar, lifted, cfg, layers, workers)
            for (cid, row, col), f in zip(lifted.indices, image_feats):
                grids[cid].features[row * grids[cid].cols + col] = f
            record["image_tokens"] = len(lifted)
            record["lift_fraction"] = lifted.info["lift_fraction"]
        lidar = lidar.with_features(feats)
        timings[name] = tick() - t0
        record["lidar_tokens_out"] = len(lidar)
        stages.append(record)
    lidar, pool_info = _pool(lidar, levels[2], levels[3], model.pool_scores[2])
    pools.append(pool_info)
    t0 = tick()
    bev = densify_bev(lidar, cfg.grid)
    timings["densify"] = tick() - t0
    stages.append({"name": "densify", "level_z": lidar.level_z, "lidar_tokens_in": len(lidar),
                   "lidar_tokens_out": len(lidar), "nonzero_cells": int(np.any(bev != 0, axis=2).sum())})
    stats = {
        "fusion_order": cfg.fusion_order,
        "lidar_projection": cfg.lidar_projection,
        "image_projection": cfg.image_projection,
        "level_z": [st["level_z"] for st in stages],
        "stages": stages,
        "pooling": pools,
        "bev_shape": list(bev.shape),
        "timings_ns": timings,
    }
    return PipelineResult(stats, bev, lidar)


def _pool(lidar: TokenSet, level_from: int, level_to: int, score) -> tuple:
    if lidar.level_z != level_from:
        raise LevelMismatch(f"expected level_z {level_from}, got {lidar.level_z}")
    factor = level_from // level_to
    pooled = attentive_pool_z(lidar, factor, score)
    return pooled, {"from": level_from, "to": level_to, "tokens_in": len(lidar), "tokens_out": len(pooled),
                    "merged": pooled.info["merged"]}
