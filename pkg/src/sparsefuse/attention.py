"""Grouped windowed attention and the transformer block around it.

Everything runs in float64. Weights are stored as (fan_in, fan_out) so a
projection is ``x @ W``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .partition import PartitionPlan
from .tokens import TokenSet

LN_EPS = 1e-5
NORM_STYLES = ("prenorm", "postnorm")
PE_STYLES = ("pe3d", "window_local")
# Groups are processed in fixed-size chunks so results do not depend on the
# worker count.
CHUNK_GROUPS = 64


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 128
    heads: int = 8
    ffn_hidden: int = 256
    norm_style: str = "prenorm"
    pe_style: str = "pe3d"
    seed: int = 0
    pe_range: float = 108.0  # meters spanned by the longest PE period

    def __post_init__(self):
        if self.dim <= 0 or self.heads <= 0 or self.ffn_hidden <= 0:
            raise ValueError("dim, heads and ffn_hidden must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        style = self.norm_style.lower().replace("-", "").replace("_", "")
        if style not in NORM_STYLES:
            raise ValueError(f"unknown norm style {self.norm_style!r}")
        object.__setattr__(self, "norm_style", style)
        pe = {"pe3d": "pe3d", "3d": "pe3d", "windowlocal": "window_local", "window_local": "window_local",
              "window": "window_local"}.get(self.pe_style.lower())
        if pe is None:
            raise ValueError(f"unknown PE style {self.pe_style!r}")
        object.__setattr__(self, "pe_style", pe)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray

    def zero_output_projections(self) -> "LayerWeights":
        """Copy with the attention and FFN output matrices set to zero."""
        arrays = {f.name: getattr(self, f.name).copy() for f in fields(self)}
        arrays["wo"][:] = 0.0
        arrays["w_down"][:] = 0.0
        return LayerWeights(**arrays)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & (2**64 - 1), *stream])


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_layer_weights(cfg: ModelConfig, *stream: int) -> LayerWeights:
    """Seeded uniform(+-1/sqrt(fan_in)) weights; ``stream`` separates layers."""
    rng = make_rng(cfg.seed, 1, *stream)
    d, h = cfg.dim, cfg.ffn_hidden
    return LayerWeights(
        wq=_uniform(rng, d, (d, d)),
        wk=_uniform(rng, d, (d, d)),
        wv=_uniform(rng, d, (d, d)),
        wo=_uniform(rng, d, (d, d)),
        w_gate=_uniform(rng, d, (d, h)),
        w_up=_uniform(rng, d, (d, h)),
        w_down=_uniform(rng, h, (h, d)),
        ln1_gain=np.ones(d),
        ln1_bias=np.zeros(d),
        ln2_gain=np.ones(d),
        ln2_bias=np.zeros(d),
    )


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + LN_EPS) * gain + bias


def silu(t: np.ndarray) -> np.ndarray:
    return t / (1.0 + np.exp(-t))


def swiglu_ffn(x: np.ndarray, w: LayerWeights) -> np.ndarray:
    """``w_down(silu(x @ w_gate) * (x @ w_up))``, no biases."""
    with np.errstate(over="ignore"):
        return (silu(x @ w.w_gate) * (x @ w.w_up)) @ w.w_down


def attend(xg: np.ndarray, w: LayerWeights, heads: int, key_valid=None):
    """Multi-head softmax attention inside each group of a (B, G, D) batch.

    Returns ``(mixed, weights)``: the head-concatenated values before the
    output projection, (B, G, D), and the attention weights, (B, H, G, G).
    Keys flagged False in ``key_valid`` (B, G) get zero weight.
    """
    B, G, D = xg.shape
    dh = D // heads
    wqkv = np.concatenate([w.wq, w.wk, w.wv], axis=1)
    qkv = (xg.reshape(B * G, D) @ wqkv).reshape(B, G, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    weights = q @ k.transpose(0, 1, 3, 2)
    weights *= 1.0 / math.sqrt(dh)
    if key_valid is not None:
        weights[~np.broadcast_to(key_valid[:, None, None, :], weights.shape)] = -np.inf
    weights -= weights.max(axis=-1, keepdims=True)
    np.exp(weights, out=weights)
    weights /= weights.sum(axis=-1, keepdims=True)
    mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(B, G, D)
    return mixed, weights


def _run_chunks(jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        for job in jobs:
            job()
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda job: job(), jobs))


def grouped_attention(x: np.ndarray, plan: PartitionPlan, w: LayerWeights, heads: int, workers: int = 1) -> np.ndarray:
    """Attention restricted to the groups of ``plan``; returns (N, D) outputs.

    Maskless plans are batched by group length with no mask at all; padded
    plans mask their invalid key slots. Each group writes only its own rows.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    if plan.n_groups == 0:
        return out
    slots = plan.slot_matrix()
    jobs = []

    def job(rows, key_valid):
        def run():
            idx = np.where(rows >= 0, rows, 0)
            mixed, _ = attend(x[idx], w, heads, key_valid)
            y = mixed @ w.wo
            valid = rows >= 0
            out[rows[valid]] = y[valid]
        return run

    if plan.maskless:
        sizes = plan.group_sizes
        for size in np.unique(sizes):
            sel = slots[sizes == size, :size]
            for lo in range(0, len(sel), CHUNK_GROUPS):
                jobs.append(job(sel[lo : lo + CHUNK_GROUPS], None))
    else:
        for lo in range(0, len(slots), CHUNK_GROUPS):
            chunk = slots[lo : lo + CHUNK_GROUPS]
            jobs.append(job(chunk, chunk >= 0))
    _run_chunks(jobs, workers)
    return out


def transformer_layer(x: np.ndarray, plan: PartitionPlan, w: LayerWeights, cfg: ModelConfig, workers: int = 1,
                      pos: np.ndarray | None = None) -> np.ndarray:
    """One attention + SwiGLU block in PreNorm or PostNorm arrangement.

    ``pos`` (N, D), when given, is added to the attention branch input only,
    so the residual stream is untouched by it.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.norm_style == "prenorm":
        h = layer_norm(x, w.ln1_gain, w.ln1_bias)
        if pos is not None:
            h = h + pos
        x = x + grouped_attention(h, plan, w, cfg.heads, workers)
        return x + swiglu_ffn(layer_norm(x, w.ln2_gain, w.ln2_bias), w)
    h = x if pos is None else x + pos
    x = layer_norm(x + grouped_attention(h, plan, w, cfg.heads, workers), w.ln1_gain, w.ln1_bias)
    return layer_norm(x + swiglu_ffn(x, w), w.ln2_gain, w.ln2_bias)


def positional_encoding(coords: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Per-axis sinusoids over ``coords``, laid out [x | y | z | zero pad].

    Each axis gets ``dim // 6`` (sin, cos) pairs with periods spanning
    ``pe_range`` down to ``pe_range / 10000``. Remaining channels are zero.
    For the window-local style pass local window coordinates instead of
    metric ones.
    """
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    n_freq = cfg.dim // 6
    out = np.zeros((len(c), cfg.dim))
    if n_freq == 0:
        return out
    freqs = (2 * math.pi / cfg.pe_range) * 10000.0 ** (np.arange(n_freq) / n_freq)
    angles = c[:, :, None] * freqs  # (N, 3, F)
    pairs = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # (N, 3, F, 2)
    out[:, : 6 * n_freq] = pairs.reshape(len(c), 6 * n_freq)
    return out


def attentive_pool_z(tokens: TokenSet, factor: int, score: np.ndarray) -> TokenSet:
    """Merge tokens sharing (ix, iy, iz // factor) by a softmax-weighted sum.

    The merge weight of a token is softmax over its column of
    ``features @ score``.
    """
    if factor < 1 or tokens.level_z % factor:
        raise ValueError(f"level_z {tokens.level_z} not divisible by factor {factor}")
    if tokens.indices is None:
        raise ValueError("attentive pooling needs grid indices")
    new_level = tokens.level_z // factor
    if factor == 1 or len(tokens) == 0:
        return TokenSet(
            coords=tokens.coords.copy(), features=tokens.features.copy(), indices=tokens.indices.copy(),
            level_z=new_level, grid=tokens.grid, info={"merged": 0},
        )
    idx = tokens.indices.copy()
    idx[:, 2] //= factor
    _, first, inverse = np.unique(idx, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    starts = np.flatnonzero(np.r_[True, np.diff(inverse[order]) != 0])
    feats = tokens.features[order]
    s = feats @ np.asarray(score, dtype=np.float64)
    s -= np.repeat(np.maximum.reduceat(s, starts), np.diff(np.append(starts, len(s))))
    e = np.exp(s)
    denom = np.add.reduceat(e, starts)
    pooled = np.add.reduceat(feats * e[:, None], starts, axis=0) / denom[:, None]
    new_idx = idx[first]
    grid = tokens.grid
    coords = grid.centers(new_idx, new_level) if grid is not None else tokens.coords[first]
    return TokenSet(
        coords=coords, features=pooled, indices=new_idx, level_z=new_level, grid=grid,
        info={"merged": len(tokens) - len(new_idx)},
    )


def save_weights(weights: dict, path) -> None:
    """Write ``<path>.bin`` (little-endian float64, concatenated) and ``<path>.json`` manifest."""
    path = Path(path)
    manifest, offset = [], 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name in sorted(weights):
            arr = np.ascontiguousarray(weights[name], dtype="<f8")
            fh.write(arr.tobytes())
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "<f8"})
            offset += arr.nbytes
    path.with_suffix(".json").write_text(json.dumps({"tensors": manifest, "total_bytes": offset}, indent=1))


def load_weights(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    out = {}
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        out[t["name"]] = np.frombuffer(raw, dtype=t["dtype"], count=count, offset=t["offset"]).reshape(t["shape"]).copy()
    return out


def layer_to_dict(w: LayerWeights, prefix: str = "") -> dict:
    return {prefix + f.name: getattr(w, f.name) for f in fields(w)}


def layer_from_dict(d: dict, prefix: str = "") -> LayerWeights:
    return LayerWeights(**{f.name: d[prefix + f.name] for f in fields(LayerWeights)})
