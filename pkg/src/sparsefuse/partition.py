"""Window keys, token sorting and the three grouping algorithms.

All grouping functions take an (N, 3) coordinate array. Coordinates may be
metric, voxel grid indices or pixel coordinates ``(u, v, 0)``; the window
shape must be expressed in the same units.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import pdist

PATTERNS = ("x", "x-shift", "y", "y-shift")
ALGORITHMS = ("flatten", "dynset", "curve")
CURVES = ("morton", "hilbert")
CURVE_BITS = 21

_PATTERN_ALIASES = {"xs": "x-shift", "ys": "y-shift", "u": "x", "u-shift": "x-shift", "v": "y", "v-shift": "y-shift"}
_ALGO_ALIASES = {
    "flattenwindow": "flatten",
    "flatten_window": "flatten",
    "dynamicset": "dynset",
    "dynamic_set": "dynset",
    "spacefillingcurve": "curve",
    "space_filling_curve": "curve",
}


class IndexOverflow(ValueError):
    """Grid index does not fit the 21-bit-per-axis curve budget."""


def normalize_pattern(pattern: str) -> str:
    p = _PATTERN_ALIASES.get(pattern.lower(), pattern.lower())
    if p not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}")
    return p


def normalize_algorithm(algo: str) -> str:
    a = _ALGO_ALIASES.get(algo.lower(), algo.lower())
    if a not in ALGORITHMS:
        raise ValueError(f"unknown partition algorithm {algo!r}")
    return a


@dataclass(frozen=True)
class PartitionConfig:
    window_shape: tuple = (4.8, 4.8, 8.0)
    group_size: int = 80
    pattern: str = "x"
    algorithm: str = "flatten"
    curve: str = "morton"

    def __post_init__(self):
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if len(self.window_shape) != 3 or any(w <= 0 for w in self.window_shape):
            raise ValueError("window_shape needs three positive extents")
        object.__setattr__(self, "pattern", normalize_pattern(self.pattern))
        object.__setattr__(self, "algorithm", normalize_algorithm(self.algorithm))
        if self.curve.lower() not in CURVES:
            raise ValueError(f"unknown curve {self.curve!r}")
        object.__setattr__(self, "curve", self.curve.lower())

    @property
    def shifted(self) -> bool:
        return self.pattern.endswith("shift")

    @property
    def y_major(self) -> bool:
        return self.pattern.startswith("y")

    def with_pattern(self, pattern: str) -> "PartitionConfig":
        return PartitionConfig(self.window_shape, self.group_size, pattern, self.algorithm, self.curve)


@dataclass(frozen=True)
class WindowKey:
    wx: int
    wy: int
    wz: int
    lx: float
    ly: float
    lz: float


def _shift_vector(window_shape, shifted: bool) -> np.ndarray:
    w = np.asarray(window_shape)
    if not shifted:
        return np.zeros(3, dtype=w.dtype)
    return np.array([w[0] / 2, w[1] / 2, 0 * w[2]])


def window_keys(points: np.ndarray, cfg: PartitionConfig):
    """Vectorized window/local decomposition; returns (window int64 (N,3), local (N,3))."""
    pts = np.asarray(points).reshape(-1, 3)
    w = np.asarray(cfg.window_shape, dtype=np.float64)
    if cfg.shifted:
        pts = pts + _shift_vector(w, True)
    win = np.floor(pts / w)
    local = pts - win * w
    # rounding can land a tiny negative coordinate exactly on the upper edge
    edge = local >= w
    win = win + edge
    local = np.where(edge, local - w, local)
    local = np.maximum(local, 0.0)
    return win.astype(np.int64), local


def window_key(p, cfg: PartitionConfig) -> WindowKey:
    win, local = window_keys(np.asarray(p, dtype=np.float64), cfg)
    return WindowKey(*(int(v) for v in win[0]), *(float(v) for v in local[0]))


def _integral_windows(points: np.ndarray, cfg: PartitionConfig):
    """Window shape as int64 when points are integer grid indices and every
    window extent (and half-extent, for shifts) is a whole number of cells."""
    if not np.issubdtype(points.dtype, np.integer):
        return None
    w = np.asarray(cfg.window_shape, dtype=np.float64)
    half = w[:2] / 2 if cfg.shifted else w[:2]
    if np.any(w != np.round(w)) or np.any(half != np.round(half)):
        return None
    return w.astype(np.int64)


def _composite_key(points: np.ndarray, w: np.ndarray, cfg: PartitionConfig):
    """Single int64 key ordering by (window, local) for lattice inputs.

    Returns (key, window_part) or None if the key would not fit in 63 bits.
    """
    pts = points
    if cfg.shifted:
        pts = pts + np.array([w[0] // 2, w[1] // 2, 0])
    win = pts // w
    local = pts - win * w
    wmin = win.min(axis=0)
    span = win.max(axis=0) - wmin + 1
    win = win - wmin
    a, b = (1, 0) if cfg.y_major else (0, 1)
    wkey = (win[:, a] * span[b] + win[:, b]) * span[2] + win[:, 2]
    lkey = (local[:, a] * w[b] + local[:, b]) * w[2] + local[:, 2]
    cells = int(w.prod())
    if int(span.prod()) * cells >= 2**62:
        return None
    return wkey * cells + lkey, wkey


def _lex_keys(points: np.ndarray, cfg: PartitionConfig):
    win, local = window_keys(points, cfg)
    if cfg.y_major:
        keys = (local[:, 2], local[:, 0], local[:, 1], win[:, 2], win[:, 0], win[:, 1])
    else:
        keys = (local[:, 2], local[:, 1], local[:, 0], win[:, 2], win[:, 1], win[:, 0])
    return keys, win


def _sorted_with_windows(points: np.ndarray, cfg: PartitionConfig):
    """Stable (window, local) sort; returns (perm, window id per sorted token)."""
    points = np.asarray(points).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    w = _integral_windows(points, cfg)
    packed = None if w is None else _composite_key(points, w, cfg)
    if packed is not None:
        key, wkey = packed
        perm = np.argsort(key, kind="stable")
        return perm, wkey[perm]
    keys, win = _lex_keys(points, cfg)
    perm = np.lexsort(keys)
    sw = win[perm]
    change = np.ones(len(perm), dtype=bool)
    change[1:] = np.any(sw[1:] != sw[:-1], axis=1)
    return perm, np.cumsum(change) - 1


def sort_tokens(points: np.ndarray, cfg: PartitionConfig) -> np.ndarray:
    """Stable permutation ordering tokens by window coordinates, then local ones.

    Pattern x / x-shift uses (wx, wy, wz, lx, ly, lz); y / y-shift swaps the
    roles of x and y.
    """
    return _sorted_with_windows(points, cfg)[0]


@dataclass
class PartitionPlan:
    """Token order split into groups.

    ``order`` maps slots to token indices; padded slots (DynamicSet only)
    hold -1 and are False in ``pad_mask``. ``group_starts`` are slot offsets
    of each group.
    """

    order: np.ndarray
    group_starts: np.ndarray
    group_size: int
    pad_mask: Optional[np.ndarray] = None
    windows_of_groups: Optional[np.ndarray] = None

    @property
    def n_groups(self) -> int:
        return len(self.group_starts)

    @property
    def n_slots(self) -> int:
        return len(self.order)

    @property
    def n_tokens(self) -> int:
        return self.n_slots if self.pad_mask is None else int(self.pad_mask.sum())

    @property
    def maskless(self) -> bool:
        return self.pad_mask is None

    @property
    def group_sizes(self) -> np.ndarray:
        return np.diff(np.append(self.group_starts, self.n_slots))

    def valid_counts(self) -> np.ndarray:
        if self.pad_mask is None:
            return self.group_sizes
        return np.add.reduceat(self.pad_mask.astype(np.int64), self.group_starts) if self.n_groups else np.zeros(0, int)

    def slot_matrix(self) -> np.ndarray:
        """(n_groups, max group size) token indices, -1 where empty."""
        sizes = self.group_sizes
        width = int(sizes.max()) if len(sizes) else 0
        out = np.full((self.n_groups, width), -1, dtype=np.int64)
        if self.n_groups == 0:
            return out
        gid = np.repeat(np.arange(self.n_groups), sizes)
        col = np.arange(self.n_slots) - self.group_starts[gid]
        out[gid, col] = self.order
        return out

    def group_ids(self, n_tokens: Optional[int] = None) -> np.ndarray:
        """Group id per token index."""
        n = self.n_tokens if n_tokens is None else n_tokens
        gid = np.repeat(np.arange(self.n_groups), self.group_sizes)
        out = np.full(n, -1, dtype=np.int64)
        valid = self.order >= 0
        out[self.order[valid]] = gid[valid]
        return out

    def validate(self, n_tokens: int) -> None:
        """Raise ValueError if the plan is not a proper grouping of ``n_tokens`` tokens."""
        valid = self.order[self.order >= 0]
        if len(valid) != n_tokens or not np.array_equal(np.sort(valid), np.arange(n_tokens)):
            raise ValueError("plan order is not a permutation of the tokens")
        if np.any(np.diff(self.group_starts) <= 0):
            raise ValueError("group starts must be strictly increasing")
        if self.pad_mask is not None:
            if not np.array_equal(self.pad_mask, self.order >= 0):
                raise ValueError("pad mask disagrees with order")
            if np.any(self.group_sizes != self.group_size):
                raise ValueError("padded groups must all have group_size slots")
            if np.any(self.valid_counts() == 0):
                raise ValueError("group with no valid token")
        elif self.n_groups:
            sizes = self.group_sizes
            if np.any(sizes[:-1] != self.group_size) or not (0 < sizes[-1] <= self.group_size):
                raise ValueError("maskless groups must be full except possibly the last")
        elif self.n_slots:
            raise ValueError("slots without groups")

    def to_csv(self, path, coords: Optional[np.ndarray] = None) -> None:
        """Write ``token_index,group_id,valid`` rows in slot order (plus x,y,z if given)."""
        gid = np.repeat(np.arange(self.n_groups), self.group_sizes)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["token_index", "group_id", "valid"]
            if coords is not None:
                header += ["x", "y", "z"]
            writer.writerow(header)
            for slot, tok in enumerate(self.order):
                row = [int(tok), int(gid[slot]), int(tok >= 0)]
                if coords is not None:
                    row += ["", "", ""] if tok < 0 else [repr(float(c)) for c in coords[tok]]
                writer.writerow(row)


def _chunked(order: np.ndarray, group_size: int) -> PartitionPlan:
    starts = np.arange(0, len(order), group_size, dtype=np.int64)
    return PartitionPlan(order=order.astype(np.int64), group_starts=starts, group_size=group_size)


def flatten_window_groups(points: np.ndarray, cfg: PartitionConfig) -> PartitionPlan:
    """Chunk the window-sorted order into runs of G, ignoring window borders."""
    return _chunked(sort_tokens(points, cfg), cfg.group_size)


def dynamic_set_groups(points: np.ndarray, cfg: PartitionConfig) -> PartitionPlan:
    """Split each window's tokens into ceil(n/G) padded groups of G slots.

    Groups never cross a window boundary; unused slots hold -1.
    """
    G = cfg.group_size
    perm, sorted_win = _sorted_with_windows(points, cfg)
    n = len(perm)
    if n == 0:
        return PartitionPlan(np.zeros(0, np.int64), np.zeros(0, np.int64), G, np.zeros(0, bool), np.zeros(0, np.int64))
    change = np.ones(n, dtype=bool)
    change[1:] = sorted_win[1:] != sorted_win[:-1]
    win_start = np.flatnonzero(change)
    counts = np.diff(np.append(win_start, n))
    groups_per_win = -(-counts // G)
    first_group = np.concatenate(([0], np.cumsum(groups_per_win)[:-1]))
    win_of_sorted = np.cumsum(change) - 1
    rank = np.arange(n) - win_start[win_of_sorted]
    slot = (first_group[win_of_sorted] + rank // G) * G + rank % G
    n_groups = int(groups_per_win.sum())
    order = np.full(n_groups * G, -1, dtype=np.int64)
    order[slot] = perm
    return PartitionPlan(
        order=order,
        group_starts=np.arange(n_groups, dtype=np.int64) * G,
        group_size=G,
        pad_mask=order >= 0,
        windows_of_groups=np.repeat(np.arange(len(win_start)), groups_per_win),
    )


def _check_curve_input(idx: np.ndarray, bits: int) -> np.ndarray:
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("curve encoding needs integer grid indices")
    idx = idx.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= (1 << bits)):
        raise IndexOverflow(f"grid index outside [0, 2^{bits})")
    return idx


def morton_encode(indices: np.ndarray, bits: int = CURVE_BITS) -> np.ndarray:
    """Z-order codes: bit i of x, y, z lands at bit 3i, 3i+1, 3i+2."""
    idx = _check_curve_input(indices, bits).reshape(-1, 3)
    code = np.zeros(len(idx), dtype=np.int64)
    for i in range(bits):
        for axis in range(3):
            code |= ((idx[:, axis] >> i) & 1) << (3 * i + axis)
    return code


def hilbert_encode(indices: np.ndarray, bits: int = CURVE_BITS) -> np.ndarray:
    """3D Hilbert index (Skilling's transpose algorithm), ``bits`` per axis."""
    idx = _check_curve_input(indices, bits).reshape(-1, 3)
    x = [idx[:, a].copy() for a in range(3)]
    q = 1 << (bits - 1)
    while q > 1:
        p = q - 1
        for i in range(3):
            hit = (x[i] & q) != 0
            t = (x[0] ^ x[i]) & p
            x[0] = np.where(hit, x[0] ^ p, x[0] ^ t)
            if i:
                x[i] = np.where(hit, x[i], x[i] ^ t)
        q >>= 1
    x[1] ^= x[0]
    x[2] ^= x[1]
    t = np.zeros_like(x[0])
    q = 1 << (bits - 1)
    while q > 1:
        t = np.where((x[2] & q) != 0, t ^ (q - 1), t)
        q >>= 1
    x = [xi ^ t for xi in x]
    code = np.zeros(len(idx), dtype=np.int64)
    for b in range(bits - 1, -1, -1):
        for i in range(3):
            code = (code << 1) | ((x[i] >> b) & 1)
    return code


def curve_encode(ix: int, iy: int, iz: int, curve: str = "morton") -> int:
    fn = morton_encode if curve == "morton" else hilbert_encode
    return int(fn(np.array([[ix, iy, iz]], dtype=np.int64))[0])


def curve_groups(indices: np.ndarray, cfg: PartitionConfig, window_cells=None) -> PartitionPlan:
    """Sort integer grid indices by curve code and chunk into runs of G.

    Shift patterns translate indices by half of ``window_cells`` (x and y)
    before encoding; y patterns swap the x and y axes.
    """
    idx = np.asarray(indices).reshape(-1, 3)
    if len(idx) == 0:
        return _chunked(np.zeros(0, np.int64), cfg.group_size)
    if cfg.shifted:
        cells = np.asarray(cfg.window_shape if window_cells is None else window_cells, dtype=np.float64)
        idx = idx + np.array([int(cells[0] // 2), int(cells[1] // 2), 0])
    if cfg.y_major:
        idx = idx[:, [1, 0, 2]]
    code = morton_encode(idx) if cfg.curve == "morton" else hilbert_encode(idx)
    return _chunked(np.argsort(code, kind="stable"), cfg.group_size)


def build_plan(points: np.ndarray, cfg: PartitionConfig, window_cells=None) -> PartitionPlan:
    """Dispatch to the configured algorithm. Curve partitioning needs integer indices."""
    if cfg.algorithm == "flatten":
        return flatten_window_groups(points, cfg)
    if cfg.algorithm == "dynset":
        return dynamic_set_groups(points, cfg)
    return curve_groups(points, cfg, window_cells)


def mean_intra_group_distance(points: np.ndarray, plan: PartitionPlan) -> float:
    """Mean over groups of the mean pairwise distance among valid members.

    Groups with fewer than two members score 0.
    """
    if plan.n_groups == 0:
        return 0.0
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    scores = [pdist(pts[row[row >= 0]]).mean() if np.count_nonzero(row >= 0) > 1 else 0.0
              for row in plan.slot_matrix()]
    return float(np.mean(scores))


@dataclass
class GroupedFeatures:
    """Features laid out per group, as an attention kernel consumes them.

    Maskless plans give ``full`` (n_full, G, D) plus a ragged ``tail``;
    padded plans give ``full`` (n_groups, G, D) with zero rows at padded
    slots and a boolean ``key_valid`` (n_groups, G).
    """

    full: np.ndarray
    tail: np.ndarray
    key_valid: Optional[np.ndarray] = None


def gather_groups(features: np.ndarray, plan: PartitionPlan) -> GroupedFeatures:
    G, dim = plan.group_size, features.shape[1]
    if plan.maskless:
        m = (plan.n_slots // G) * G
        return GroupedFeatures(features[plan.order[:m]].reshape(-1, G, dim), features[plan.order[m:]])
    valid = plan.pad_mask
    out = np.zeros((plan.n_slots, dim), dtype=features.dtype)
    out[valid] = features[plan.order[valid]]
    return GroupedFeatures(out.reshape(-1, G, dim), out[:0], valid.reshape(-1, G))
