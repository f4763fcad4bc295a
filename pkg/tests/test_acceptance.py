"""Desk-scale acceptance checks. A summary line per criterion is printed at the end of the run."""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from sparsefuse import geometry
from sparsefuse.attention import ModelConfig, attend, grouped_attention, init_layer_weights, transformer_layer
from sparsefuse.bench import MIN_REPEATS, WARMUP, lattice_config, partition_phase, time_call
from sparsefuse.fusion import (
    CameraHits,
    FusionModel,
    ImageTokenGrid,
    PipelineConfig,
    Projection,
    make_image_grids,
    partial_project_2d_to_3d,
    project_tokens_3d_to_2d,
    run_pipeline,
)
from sparsefuse.partition import PartitionConfig, PartitionPlan, build_plan, mean_intra_group_distance, window_keys
from sparsefuse.scene import generate_scene, street_spec, uniform_voxel_cloud, wall_scene
from sparsefuse.voxelizer import VoxelGridConfig, pillarize, voxelize

GRID = VoxelGridConfig()
N_SCENES = 100
LOCALITY_ALGOS = {"flatten": ("flatten", "morton"), "dynset": ("dynset", "morton"),
                  "morton": ("curve", "morton"), "hilbert": ("curve", "hilbert")}


@pytest.fixture(scope="module")
def street_tokens():
    return [voxelize(generate_scene(street_spec(seed)).cloud, GRID) for seed in range(N_SCENES)]


def lattice(algo, pattern="x", G=80):
    kind, curve = LOCALITY_ALGOS[algo]
    return lattice_config(PartitionConfig(group_size=G, pattern=pattern, algorithm=kind, curve=curve), GRID)


@pytest.mark.criterion(1, "geometry round trip < 1e-6 on 10k in-frame points per camera, < 1 s")
def test_geometry_round_trip():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    for cam in geometry.surround_rig():
        n = 10_000
        u = rng.uniform(0, cam.width, n)
        v = rng.uniform(0, cam.height, n)
        d = rng.uniform(0.5, 80.0, n)
        world = geometry.unproject_points(u, v, d, cam)
        uv, depth, status = geometry.project_points(world, cam)
        assert np.all(status == geometry.VISIBLE)
        worst = max(worst, np.abs(uv - np.column_stack([u, v])).max(), np.abs(depth - d).max())
        back = geometry.unproject_points(uv[:, 0], uv[:, 1], depth, cam)
        worst = max(worst, np.abs(back - world).max())
    elapsed = time.perf_counter() - t0
    assert worst < 1e-6
    assert elapsed < 1.0


@pytest.mark.criterion(2, "every plan on 100 scenes is a bijection with the stated group shapes")
def test_partition_correctness(street_tokens):
    violations = []
    for seed, tok in enumerate(street_tokens):
        n = len(tok)
        for algo in LOCALITY_ALGOS:
            for pattern in ("x", "x-shift", "y", "y-shift"):
                cfg = lattice(algo, pattern)
                plan = build_plan(tok.indices, cfg, cfg.window_shape)
                valid = plan.order[plan.order >= 0]
                if not np.array_equal(np.sort(valid), np.arange(n)):
                    violations.append((seed, algo, pattern, "bijection"))
                sizes = plan.group_sizes
                if algo == "dynset":
                    if np.any(sizes != 80) or plan.pad_mask is None:
                        violations.append((seed, algo, pattern, "slots"))
                    win, _ = window_keys(tok.indices, cfg)
                    slots = plan.slot_matrix()
                    w = win[np.where(slots >= 0, slots, slots.max(axis=1, keepdims=True))]
                    if np.any((w != w[:, :1]).any(axis=2)):
                        violations.append((seed, algo, pattern, "window"))
                elif np.any(sizes[:-1] != 80) or not 1 <= sizes[-1] <= 80 or plan.pad_mask is not None:
                    violations.append((seed, algo, pattern, "sizes"))
    assert violations == []


@pytest.mark.criterion(3, "scene-averaged locality DynamicSet < Morton < FlattenWindow at G=80, < 30 s")
def test_locality_ordering(street_tokens):
    t0 = time.perf_counter()
    means = {}
    for algo in ("flatten", "morton", "dynset"):
        cfg = lattice(algo)
        scores = [mean_intra_group_distance(tok.coords, build_plan(tok.indices, cfg, cfg.window_shape))
                  for tok in street_tokens]
        means[algo] = float(np.mean(scores))
    elapsed = time.perf_counter() - t0
    print(f"locality (m): {means}, {elapsed:.1f} s")
    assert means["dynset"] < means["morton"] < means["flatten"]
    assert elapsed < 30.0


@pytest.mark.criterion(4, "partition-phase median Flatten < Morton < DynamicSet by >= 10% on 100k tokens")
def test_latency_ordering():
    tok = voxelize(uniform_voxel_cloud(0, 100_000, GRID), GRID)
    assert len(tok) == 100_000
    feats = np.random.default_rng(0).standard_normal((len(tok), 128))
    med = {}
    for algo in ("flatten", "morton", "dynset"):
        cfg = lattice(algo)
        med[algo] = float(np.median(time_call(lambda: partition_phase(tok.indices, feats, cfg), MIN_REPEATS, WARMUP)))
    print({k: f"{v / 1e6:.1f} ms" for k, v in med.items()})
    assert med["flatten"] * 1.1 <= med["morton"]
    assert med["morton"] * 1.1 <= med["dynset"]


@pytest.mark.criterion(5, "wall scene: voxel projection touches >= 2x the image rows of pillar projection")
def test_voxel_pillar_coverage():
    scene = wall_scene()

    def rows(tokens):
        proj = project_tokens_3d_to_2d(tokens, scene.cameras)
        return len({(c, int(v)) for c, h in enumerate(proj.per_camera) for v in np.floor(h.uv[:, 1])})

    vox, pil = rows(voxelize(scene.cloud, GRID)), rows(pillarize(scene.cloud, GRID))
    print(f"rows voxel={vox} pillar={pil}")
    assert pil > 0 and vox >= 2 * pil


@pytest.mark.criterion(6, "partial projection re-projects to assigned depth within 1e-6; occlusion takes 5 m")
def test_partial_projection_fidelity():
    scene = generate_scene(street_spec(0))
    cfg = PipelineConfig()
    lidar = voxelize(scene.cloud, cfg.grid)
    proj = project_tokens_3d_to_2d(lidar, scene.cameras)
    lifted = partial_project_2d_to_3d(make_image_grids(scene.cameras, cfg, FusionModel(cfg)), proj, scene.cameras, cfg)
    assert len(lifted) > 0
    worst = 0.0
    for cid, cam in enumerate(scene.cameras):
        sel = lifted.camera_id == cid
        _, depth, status = geometry.project_points(lifted.coords[sel], cam)
        assert np.all(status == geometry.VISIBLE)
        worst = max(worst, float(np.max(np.abs(depth - lifted.pixels[sel, 2]), initial=0.0)))
    assert worst < 1e-6

    # a near and a far surface landing on the same patch
    cam = geometry.look_along(0.0, (0.0, 0.0, 1.6))
    near = geometry.unproject_pixel(geometry.PixelCoord(100.0, 100.0, 5.0), cam)
    far = geometry.unproject_pixel(geometry.PixelCoord(101.0, 99.0, 20.0), cam)
    from sparsefuse.tokens import TokenSet

    pair = project_tokens_3d_to_2d(TokenSet(coords=np.stack([far, near]), features=np.zeros((2, 1))), [cam])
    grid = ImageTokenGrid(0, np.zeros((32 * 88, 128)), 32, 88, 8)
    occl = partial_project_2d_to_3d([grid], pair, [cam], cfg)
    assert len(occl) == 1 and occl.pixels[0, 2] == 5.0


def group_oracle(x, w, heads):
    """Per-head explicit softmax attention of one group, then output projection."""
    G, D = x.shape
    dh = D // heads
    q, k, v = x @ w.wq, x @ w.wk, x @ w.wv
    out = np.zeros((G, D))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(G):
            logits = np.array([q[i, sl] @ k[j, sl] for j in range(G)]) / math.sqrt(dh)
            e = np.exp(logits - logits.max())
            out[i, sl] = (e / e.sum()) @ v[:, sl]
    return out @ w.wo


@pytest.mark.criterion(7, "PreNorm identity, PostNorm differs, grouped attention oracle on 1000 groups, rows sum to 1")
def test_transformer_structure():
    rng = np.random.default_rng(0)
    pre = ModelConfig(seed=11)
    post = replace(pre, norm_style="postnorm")
    w = init_layer_weights(pre, 0)
    zeroed = w.zero_output_projections()
    idx = rng.integers(0, 64, size=(2000, 3))
    plan = build_plan(idx, PartitionConfig((16, 16, 32), group_size=80))
    x = rng.normal(size=(2000, 128))
    assert np.array_equal(transformer_layer(x, plan, zeroed, pre), x)
    assert np.max(np.abs(transformer_layer(x, plan, zeroed, post) - x)) > 1e-3

    sizes = rng.integers(1, 9, size=1000)
    order = np.arange(sizes.sum())
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    # unequal group lengths exercise the per-length batching of maskless plans
    groups = PartitionPlan(order=order, group_starts=starts, group_size=8)
    feats = rng.normal(size=(len(order), 128))
    out = grouped_attention(feats, groups, w, pre.heads)
    worst = max(np.max(np.abs(out[s : s + n] - group_oracle(feats[s : s + n], w, pre.heads)))
                for s, n in zip(starts, sizes))
    assert worst < 1e-6

    xg = rng.normal(size=(200, 8, 128))
    valid = rng.random((200, 8)) < 0.6
    valid[:, 0] = True
    _, weights = attend(xg, w, pre.heads, valid)
    assert np.max(np.abs(weights.sum(axis=-1) - 1)) < 1e-6


@pytest.mark.criterion(8, "default pipeline records level_z (32, 8, 2, 1), conserves tokens, is bit-reproducible")
def test_pipeline_schedule():
    scene = generate_scene(street_spec(1))
    cfg = PipelineConfig()
    a = run_pipeline(scene.cloud, scene.cameras, cfg, workers=1)
    b = run_pipeline(scene.cloud, scene.cameras, cfg, workers=4)
    assert tuple(a.stats["level_z"]) == (32, 8, 2, 1)
    stages, pools = a.stats["stages"], a.stats["pooling"]
    for s in stages:
        assert s["lidar_tokens_in"] == s["lidar_tokens_out"]
    for i, p in enumerate(pools):
        assert p["tokens_in"] == stages[i]["lidar_tokens_out"]
        assert p["tokens_out"] == stages[i + 1]["lidar_tokens_in"] == p["tokens_in"] - p["merged"]
    assert a.deterministic_stats() == b.deterministic_stats()
    assert np.array_equal(a.bev, b.bev)
    assert np.array_equal(a.lidar.features, b.lidar.features)


# Four runs cover every value of every axis at least once (one run per fusion order).
COVERAGE = [
    dict(fusion_order="3d_to_2d_first", group_size=80, layers_per_stage=4, lidar_projection="voxel"),
    dict(fusion_order="2d_to_3d_first", group_size=40, layers_per_stage=2, lidar_projection="voxel"),
    dict(fusion_order="3d_to_2d_only", group_size=160, layers_per_stage=8, lidar_projection="pillar"),
    dict(fusion_order="2d_to_3d_only", group_size=80, layers_per_stage=4, lidar_projection="pillar"),
]


@pytest.mark.criterion(9, "all fusion orders, G in {40,80,160}, layers {2,4,8}, voxel and pillar complete in < 60 s")
def test_config_coverage():
    scene = generate_scene(street_spec(2))
    assert 15_000 <= len(voxelize(scene.cloud, GRID)) <= 25_000
    covered = {k: set() for k in COVERAGE[0]}
    t0 = time.perf_counter()
    for run in COVERAGE:
        cfg = PipelineConfig(partition=PartitionConfig(group_size=run["group_size"]),
                             **{k: v for k, v in run.items() if k != "group_size"})
        res = run_pipeline(scene.cloud, scene.cameras, cfg)
        assert res.bev.shape == (360, 360, 128)
        for k, v in run.items():
            covered[k].add(v)
    elapsed = time.perf_counter() - t0
    print(f"coverage runs: {elapsed:.1f} s")
    assert covered["fusion_order"] == {"3d_to_2d_first", "2d_to_3d_first", "3d_to_2d_only", "2d_to_3d_only"}
    assert covered["group_size"] == {40, 80, 160}
    assert covered["layers_per_stage"] == {2, 4, 8}
    assert covered["lidar_projection"] == {"voxel", "pillar"}
    assert elapsed < 60.0
