"""Timing harness and CSV reports for partition and pipeline sweeps."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, fields, replace
from typing import Callable, Optional

import numpy as np

from .fusion import PipelineConfig, run_pipeline
from .partition import PartitionConfig, build_plan, gather_groups, mean_intra_group_distance
from .tokens import TokenSet
from .voxelizer import VoxelGridConfig, voxelize

WARMUP = 2
MIN_REPEATS = 5
SEED_ENV = "SPARSEFUSE_SEED"


def env_seed(default: Optional[int] = None) -> Optional[int]:
    value = os.environ.get(SEED_ENV)
    if value is None or value == "":
        return default
    return int(value)


def time_call(fn: Callable, repeats: int = MIN_REPEATS, warmup: int = WARMUP) -> list:
    """Wall-clock nanoseconds of ``repeats`` calls after ``warmup`` untimed ones."""
    if repeats < MIN_REPEATS:
        raise ValueError(f"repeats must be >= {MIN_REPEATS}")
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        out.append(time.perf_counter_ns() - t0)
    return out


@dataclass
class BenchRow:
    label: str
    stage: str
    tokens_in: int
    tokens_out: int
    wall_ns: int
    repeats: int
    locality_m: float = float("nan")


class BenchReport:
    COLUMNS = [f.name for f in fields(BenchRow)]

    def __init__(self, rows=None):
        self.rows: list = list(rows or [])

    def add(self, row: BenchRow) -> None:
        self.rows.append(row)

    def median(self, label: str, stage: str) -> int:
        for r in self.rows:
            if r.label == label and r.stage == stage:
                return r.wall_ns
        raise KeyError((label, stage))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                loc = "" if np.isnan(r.locality_m) else f"{r.locality_m:.6f}"
                w.writerow([r.label, r.stage, r.tokens_in, r.tokens_out, r.wall_ns, r.repeats, loc])

    @classmethod
    def from_csv(cls, path) -> "BenchReport":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != cls.COLUMNS:
                raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
            rows = [
                BenchRow(r["label"], r["stage"], int(r["tokens_in"]), int(r["tokens_out"]), int(r["wall_ns"]),
                         int(r["repeats"]), float(r["locality_m"]) if r["locality_m"] else float("nan"))
                for r in reader
            ]
        return cls(rows)


def lidar_window_cells(cfg: PartitionConfig, grid: VoxelGridConfig, level_z: Optional[int] = None) -> np.ndarray:
    """Metric window shape expressed in whole grid cells."""
    level = int(grid.dims[2]) if level_z is None else level_z
    cells = np.asarray(cfg.window_shape) / grid.cell_size_at(level)
    cells = np.minimum(cells, [np.inf, np.inf, level])
    return np.maximum(np.round(cells), 1).astype(np.int64)


def lattice_config(cfg: PartitionConfig, grid: VoxelGridConfig) -> PartitionConfig:
    return replace(cfg, window_shape=tuple(float(c) for c in lidar_window_cells(cfg, grid)))


def partition_phase(indices: np.ndarray, features: np.ndarray, cfg: PartitionConfig):
    """Plan construction plus the grouped feature layout attention consumes.

    ``cfg.window_shape`` is in grid cells here.
    """
    plan = build_plan(indices, cfg, cfg.window_shape)
    return plan, gather_groups(features, plan)


def bench_partition(tokens: TokenSet, entries: list, repeats: int = MIN_REPEATS, dim: int = 128,
                    seed: int = 0) -> BenchReport:
    """Time the partition phase for each entry (dicts of PartitionConfig fields plus ``label``)."""
    report = BenchReport()
    features = np.random.default_rng(seed).standard_normal((len(tokens), dim))
    for entry in entries:
        label, cfg = _partition_entry(entry)
        lat = lattice_config(cfg, tokens.grid)
        times = time_call(lambda: partition_phase(tokens.indices, features, lat), repeats)
        plan, _ = partition_phase(tokens.indices, features, lat)
        report.add(BenchRow(label, "partition", len(tokens), plan.n_groups, int(np.median(times)), repeats,
                            mean_intra_group_distance(tokens.coords, plan)))
    return report


def _partition_entry(entry: dict):
    e = dict(entry)
    label = e.pop("label", None)
    e.pop("kind", None)
    if "algo" in e:
        e["algorithm"] = e.pop("algo")
    if "window_shape" in e:
        e["window_shape"] = tuple(e["window_shape"])
    cfg = PartitionConfig(**e)
    return label or f"{cfg.algorithm}-G{cfg.group_size}", cfg


def bench_pipeline(cloud, cams, entries: list, repeats: int = MIN_REPEATS) -> BenchReport:
    """Per-stage median wall time of full pipeline runs."""
    report = BenchReport()
    seed = env_seed()
    for entry in entries:
        cfg = PipelineConfig.from_dict(entry.get("config", {}))
        if seed is not None:
            cfg = cfg.with_seed(seed)
        label = entry.get("label") or cfg.fusion_order
        results = []
        time_call(lambda: results.append(run_pipeline(cloud, cams, cfg)), repeats)
        last = results[-1].stats
        by_stage = {s["name"]: s for s in last["stages"]}
        for stage in last["timings_ns"]:
            ns = int(np.median([r.stats["timings_ns"][stage] for r in results[WARMUP:]]))
            st = by_stage[stage]
            report.add(BenchRow(label, stage, st["lidar_tokens_in"], st["lidar_tokens_out"], ns, repeats))
    return report


def run_sweep(cloud, cams, sweep: dict, repeats: int = MIN_REPEATS, grid: Optional[VoxelGridConfig] = None) -> BenchReport:
    """Sweep JSON: ``{"configs": [{"kind": "partition"|"pipeline", "label": ..., ...}]}``."""
    entries = sweep["configs"] if isinstance(sweep, dict) else sweep
    part = [e for e in entries if e.get("kind", "partition") == "partition"]
    pipe = [e for e in entries if e.get("kind") == "pipeline"]
    report = BenchReport()
    if part:
        report.rows += bench_partition(voxelize(cloud, grid or VoxelGridConfig()), part, repeats).rows
    if pipe:
        report.rows += bench_pipeline(cloud, cams, pipe, repeats).rows
    return report
