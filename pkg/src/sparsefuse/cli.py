"""``sparsefuse`` command line entry point."""

from __future__ import annotations

import argparse
import json
import struct
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plotting
from .bench import MIN_REPEATS, env_seed, lattice_config, run_sweep
from .fusion import PipelineConfig, run_pipeline
from .partition import PartitionConfig, build_plan, mean_intra_group_distance
from .scene import SceneSpec, generate_scene, load_scene, save_scene
from .voxelizer import VoxelGridConfig, voxelize

ALGOS = {"flatten": "flatten", "dynset": "dynset", "curve": "curve"}
PATTERNS = {"x": "x", "xs": "x-shift", "y": "y", "ys": "y-shift"}


def _read_json(path):
    return json.loads(Path(path).read_text())


def save_bev(bev: np.ndarray, path) -> None:
    """u32 ndim, u32 shape[ndim], then little-endian float32 values (C order)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", bev.ndim))
        fh.write(struct.pack(f"<{bev.ndim}I", *bev.shape))
        fh.write(np.ascontiguousarray(bev, dtype="<f4").tobytes())


def load_bev(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (ndim,) = struct.unpack_from("<I", raw, 0)
    shape = struct.unpack_from(f"<{ndim}I", raw, 4)
    return np.frombuffer(raw, dtype="<f4", offset=4 + 4 * ndim).reshape(shape)


def cmd_generate(args):
    spec = SceneSpec.from_dict(_read_json(args.spec))
    seed = env_seed()
    if seed is not None:
        spec = replace(spec, seed=seed)
    scene = generate_scene(spec)
    save_scene(scene, args.out)
    print(json.dumps({"points": len(scene.cloud), "cameras": len(scene.cameras), "out": str(args.out)}))


def cmd_partition(args):
    cloud, _ = load_scene(args.scene)
    grid = VoxelGridConfig()
    tokens = voxelize(cloud, grid)
    cfg = PartitionConfig(group_size=args.group_size, pattern=PATTERNS[args.pattern], algorithm=ALGOS[args.algo],
                          curve=args.curve)
    lat = lattice_config(cfg, grid)
    plan = build_plan(tokens.indices, lat, lat.window_shape)
    plan.validate(len(tokens))
    plan.to_csv(args.out, tokens.coords)
    summary = {
        "tokens": len(tokens),
        "groups": plan.n_groups,
        "slots": plan.n_slots,
        "locality_m": mean_intra_group_distance(tokens.coords, plan),
    }
    print(json.dumps(summary))


def cmd_run(args):
    cloud, cams = load_scene(args.scene)
    cfg = PipelineConfig.from_dict(_read_json(args.config)) if args.config else PipelineConfig()
    seed = env_seed()
    if seed is not None:
        cfg = cfg.with_seed(seed)
    result = run_pipeline(cloud, cams, cfg, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(json.dumps(result.stats, indent=2))
    save_bev(result.bev, out / "bev.bin")
    plotting.bev_norm(result.bev, out / "bev_norm.png")
    print(json.dumps({"level_z": result.stats["level_z"], "out": str(out)}))


def cmd_bench(args):
    cloud, cams = load_scene(args.scene)
    report = run_sweep(cloud, cams, _read_json(args.sweep), args.repeats)
    report.to_csv(args.out)
    plotting.latency_bars(plotting.read_rows(args.out), Path(args.out).with_suffix(".svg"))
    print(json.dumps({"rows": len(report.rows), "out": str(args.out)}))


def cmd_plot(args):
    plotting.plot_csv(args.input, args.kind, args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsefuse", description="Sparse camera-LiDAR fusion toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic scene")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    q = sub.add_parser("partition", help="partition a scene's voxel tokens")
    q.add_argument("--scene", required=True)
    q.add_argument("--algo", choices=sorted(ALGOS), default="flatten")
    q.add_argument("--curve", choices=["morton", "hilbert"], default="morton")
    q.add_argument("--group-size", type=int, default=80)
    q.add_argument("--pattern", choices=sorted(PATTERNS), default="x")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_partition)

    r = sub.add_parser("run", help="run the full fusion pipeline")
    r.add_argument("--scene", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="timing sweep over configs")
    b.add_argument("--scene", required=True)
    b.add_argument("--sweep", required=True)
    b.add_argument("--repeats", type=int, default=MIN_REPEATS)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    pl = sub.add_parser("plot", help="render a CSV to SVG")
    pl.add_argument("--in", dest="input", required=True)
    pl.add_argument("--kind", choices=plotting.KINDS, required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"sparsefuse {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
