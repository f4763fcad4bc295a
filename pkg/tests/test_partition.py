import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsefuse.partition import (
    IndexOverflow,
    PartitionConfig,
    build_plan,
    curve_encode,
    curve_groups,
    dynamic_set_groups,
    flatten_window_groups,
    gather_groups,
    hilbert_encode,
    mean_intra_group_distance,
    morton_encode,
    sort_tokens,
    window_key,
)


def morton_oracle(x, y, z, bits=21):
    code = 0
    for i in range(bits):
        code += ((x >> i) & 1) * 2 ** (3 * i) + ((y >> i) & 1) * 2 ** (3 * i + 1) + ((z >> i) & 1) * 2 ** (3 * i + 2)
    return code


def key_oracle(p, cfg):
    k = window_key(p, cfg)
    if cfg.pattern.startswith("y"):
        return (k.wy, k.wx, k.wz, k.ly, k.lx, k.lz)
    return (k.wx, k.wy, k.wz, k.lx, k.ly, k.lz)


def test_window_key_examples():
    k = window_key((3.5, 0, 0), PartitionConfig((2, 2, 2)))
    assert (k.wx, k.lx) == (1, 1.5)
    k = window_key((0, 0, 0), PartitionConfig((1.7, 3, 5)))
    assert (k.wx, k.wy, k.wz, k.lx, k.ly, k.lz) == (0, 0, 0, 0, 0, 0)
    k = window_key((-0.5, 0, 0), PartitionConfig((2, 2, 2)))
    assert (k.wx, k.lx) == (-1, 1.5)


def test_window_key_shift():
    k = window_key((0.5, 0.5, 0.5), PartitionConfig((2, 2, 2), pattern="x-shift"))
    assert (k.wx, k.wy, k.wz) == (0, 0, 0)
    assert (k.lx, k.ly, k.lz) == (1.5, 1.5, 0.5)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-1e3, 1e3)), st.sampled_from(["x", "x-shift", "y", "y-shift"]))
def test_window_key_reconstructs(p, pattern):
    w = np.array([1.3, 2.0, 0.7])
    cfg = PartitionConfig(tuple(w), pattern=pattern)
    k = window_key(p, cfg)
    win = np.array([k.wx, k.wy, k.wz])
    local = np.array([k.lx, k.ly, k.lz])
    assert np.all(local >= 0) and np.all(local < w)
    shift = np.array([w[0] / 2, w[1] / 2, 0]) if pattern.endswith("shift") else 0
    assert np.allclose(win * w + local, p + shift, atol=1e-9, rtol=0)


def test_sort_simple_cases():
    cfg = PartitionConfig((2, 2, 2))
    pts = np.array([[0.5, 0, 0], [2.5, 0, 0]])
    assert sort_tokens(pts, cfg).tolist() == [0, 1]
    same = np.array([[0.5, 0.5, 0.5]] * 4)
    assert sort_tokens(same, cfg).tolist() == [0, 1, 2, 3]


@pytest.mark.parametrize("pattern", ["x", "x-shift", "y", "y-shift"])
def test_sort_matches_comparison_sort_float(rng, pattern):
    pts = rng.uniform(-10, 10, size=(1000, 3))
    pts[::7] = pts[1::7][: len(pts[::7])]  # force some duplicate keys to exercise stability
    cfg = PartitionConfig((1.5, 2.5, 3.0), pattern=pattern)
    expected = sorted(range(len(pts)), key=lambda i: key_oracle(pts[i], cfg))
    assert sort_tokens(pts, cfg).tolist() == expected


@pytest.mark.parametrize("pattern", ["x", "x-shift", "y", "y-shift"])
def test_sort_matches_comparison_sort_lattice(rng, pattern):
    idx = rng.integers(0, 64, size=(1000, 3))
    cfg = PartitionConfig((8, 8, 16), pattern=pattern)
    expected = sorted(range(len(idx)), key=lambda i: key_oracle(idx[i].astype(float), cfg))
    assert sort_tokens(idx, cfg).tolist() == expected


@pytest.mark.parametrize("n,sizes", [(10, [4, 4, 2]), (8, [4, 4]), (0, [])])
def test_flatten_chunking(n, sizes):
    pts = np.arange(3 * n, dtype=float).reshape(n, 3)
    plan = flatten_window_groups(pts, PartitionConfig((100, 100, 100), group_size=4))
    assert plan.group_sizes.tolist() == sizes
    assert plan.pad_mask is None
    plan.validate(n)


def test_dynset_one_window_five_tokens():
    pts = np.array([[0.1 * i, 0, 0] for i in range(5)])
    plan = dynamic_set_groups(pts, PartitionConfig((2, 2, 2), group_size=4))
    assert plan.n_groups == 2
    assert plan.valid_counts().tolist() == [4, 1]
    assert plan.pad_mask.tolist() == [True] * 5 + [False] * 3
    plan.validate(5)


def test_dynset_exact_fit():
    pts = np.array([[0.1 * i, 0, 0] for i in range(4)] + [[3 + 0.1 * i, 0, 0] for i in range(4)])
    plan = dynamic_set_groups(pts, PartitionConfig((2, 2, 2), group_size=4))
    assert plan.n_groups == 2 and plan.pad_mask.all()


@pytest.mark.parametrize("pattern", ["x", "x-shift", "y", "y-shift"])
def test_dynset_groups_share_window(rng, pattern):
    pts = rng.uniform(-20, 20, size=(3000, 3))
    cfg = PartitionConfig((4.0, 4.0, 8.0), group_size=16, pattern=pattern)
    plan = dynamic_set_groups(pts, cfg)
    plan.validate(len(pts))
    for row in plan.slot_matrix():
        keys = {key_oracle(pts[t], cfg)[:3] for t in row if t >= 0}
        assert len(keys) == 1


def test_morton_examples():
    assert curve_encode(0, 0, 0) == 0
    assert curve_encode(1, 1, 1) == 7
    assert morton_oracle(2, 3, 1) == 30
    assert curve_encode(2, 3, 1) == morton_oracle(2, 3, 1)


def test_morton_matches_oracle(rng):
    idx = rng.integers(0, 2**21, size=(500, 3))
    codes = morton_encode(idx)
    assert [int(c) for c in codes] == [morton_oracle(*map(int, r)) for r in idx]


def test_curve_overflow():
    with pytest.raises(IndexOverflow):
        curve_encode(2**21, 0, 0)
    with pytest.raises(IndexOverflow):
        hilbert_encode(np.array([[-1, 0, 0]]))


@pytest.mark.parametrize("bits", [1, 2, 3])
def test_hilbert_bijective_and_adjacent(bits):
    side = 2**bits
    cells = np.array(list(itertools.product(range(side), repeat=3)))
    codes = hilbert_encode(cells, bits=bits)
    assert sorted(codes.tolist()) == list(range(side**3))
    walk = cells[np.argsort(codes)]
    steps = np.abs(np.diff(walk, axis=0)).sum(axis=1)
    assert np.all(steps == 1)
    assert walk[0].tolist() == [0, 0, 0]


def test_hilbert_full_depth_prefix():
    # at 21 bits the curve starts at the origin, so the 4^3 corner block owns codes 0..63
    cells = np.array(list(itertools.product(range(4), repeat=3)))
    assert sorted(hilbert_encode(cells).tolist()) == list(range(64))


def test_curve_groups_examples():
    cfg = PartitionConfig(group_size=4, algorithm="curve")
    ordered = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    assert curve_groups(ordered, cfg).order.tolist() == [0, 1, 2, 3]
    swapped = np.array([[2, 3, 1], [1, 1, 1]])  # codes 30, 7
    assert curve_groups(swapped, cfg).order.tolist() == [1, 0]
    full = curve_groups(np.arange(12).reshape(4, 3), cfg)
    assert full.group_sizes.tolist() == [4]


def brute_locality(pts, plan):
    scores = []
    for row in plan.slot_matrix():
        members = [pts[t] for t in row if t >= 0]
        pairs = list(itertools.combinations(members, 2))
        scores.append(sum(math.dist(a, b) for a, b in pairs) / len(pairs) if pairs else 0.0)
    return sum(scores) / len(scores)


def test_locality_examples():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    plan = flatten_window_groups(pts, PartitionConfig(group_size=2))
    assert mean_intra_group_distance(pts, plan) == 1.0
    same = np.zeros((10, 3))
    assert mean_intra_group_distance(same, flatten_window_groups(same, PartitionConfig(group_size=3))) == 0.0


@pytest.mark.parametrize("algo", ["flatten", "dynset", "curve"])
def test_locality_matches_brute_force(rng, algo):
    idx = rng.integers(0, 40, size=(300, 3))
    pts = idx * np.array([0.3, 0.3, 0.25])
    plan = build_plan(idx, PartitionConfig((8, 8, 8), group_size=7, algorithm=algo))
    assert mean_intra_group_distance(pts, plan) == pytest.approx(brute_locality(pts, plan), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 300),
    st.integers(1, 50),
    st.sampled_from(["flatten", "dynset", "curve"]),
    st.sampled_from(["x", "x-shift", "y", "y-shift"]),
    st.integers(0, 2**32 - 1),
)
def test_plans_are_bijections(n, G, algo, pattern, seed):
    idx = np.random.default_rng(seed).integers(0, 64, size=(n, 3))
    plan = build_plan(idx, PartitionConfig((8, 8, 8), group_size=G, pattern=pattern, algorithm=algo))
    plan.validate(n)
    valid = plan.order[plan.order >= 0]
    assert np.array_equal(np.sort(valid), np.arange(n))
    assert plan.maskless == (algo != "dynset")


def test_shift_changes_groups(rng):
    idx = rng.integers(0, 64, size=(2000, 3))
    base = PartitionConfig((8, 8, 8), group_size=20)
    a = build_plan(idx, base).group_ids()
    b = build_plan(idx, base.with_pattern("x-shift")).group_ids()
    mates_a = {frozenset(np.flatnonzero(a == g)) for g in np.unique(a)}
    mates_b = {frozenset(np.flatnonzero(b == g)) for g in np.unique(b)}
    assert mates_a != mates_b


def test_plan_csv(tmp_path):
    pts = np.array([[0.1 * i, 0, 0] for i in range(5)])
    plan = dynamic_set_groups(pts, PartitionConfig((2, 2, 2), group_size=4))
    plan.to_csv(tmp_path / "p.csv", pts)
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["token_index", "group_id", "valid", "x", "y", "z"]
    assert len(rows) == 1 + 8
    assert [r[2] for r in rows[1:]] == ["1"] * 5 + ["0"] * 3


def test_gather_groups_layout(rng):
    idx = rng.integers(0, 32, size=(50, 3))
    feats = rng.normal(size=(50, 6))
    flat = build_plan(idx, PartitionConfig((8, 8, 8), group_size=8))
    g = gather_groups(feats, flat)
    assert g.full.shape == (6, 8, 6) and g.tail.shape == (2, 6) and g.key_valid is None
    dyn = build_plan(idx, PartitionConfig((8, 8, 8), group_size=8, algorithm="dynset"))
    g = gather_groups(feats, dyn)
    assert g.full.shape == (dyn.n_groups, 8, 6)
    assert np.all(g.full[~g.key_valid] == 0)
    assert np.array_equal(g.full[g.key_valid], feats[dyn.order[dyn.pad_mask]])


def test_config_validation():
    with pytest.raises(ValueError):
        PartitionConfig(group_size=0)
    with pytest.raises(ValueError):
        PartitionConfig(pattern="z")
    assert PartitionConfig(pattern="xs").pattern == "x-shift"
    assert PartitionConfig().group_size == 80
