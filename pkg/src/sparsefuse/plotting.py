"""Matplotlib figures for partition CSVs and bench reports."""

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "svg.fonttype": "none",
    "svg.hashsalt": "sparsefuse",
    "figure.dpi": 100,
}

KINDS = ("scatter-groups", "latency-bars", "locality")


def new_figure(width=6.0, height=None):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height or width * golden))
    return fig, ax


def save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
    plt.close(fig)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def scatter_groups(rows, out, cmap="tab20"):
    """Top-down token scatter colored by group id; one marker per token."""
    rows = [r for r in rows if r["valid"] == "1"]
    if rows and "x" not in rows[0]:
        raise ValueError("scatter-groups needs a partition CSV with x,y,z columns")
    x = np.array([float(r["x"]) for r in rows])
    y = np.array([float(r["y"]) for r in rows])
    gid = np.array([int(r["group_id"]) for r in rows])
    fig, ax = new_figure(6.0, 6.0)
    # shuffle colors so neighbouring groups rarely share one
    palette = plt.get_cmap(cmap)
    colors = palette((gid * 7919) % palette.N) if len(gid) else []
    coll = ax.scatter(x, y, s=4, c=colors, linewidths=0)
    coll.set_gid("tokens")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"{len(x)} tokens, {len(np.unique(gid))} groups")
    save(fig, out)


def latency_bars(rows, out):
    labels = [f"{r['label']}:{r['stage']}" for r in rows]
    ms = [int(r["wall_ns"]) / 1e6 for r in rows]
    fig, ax = new_figure(max(4.0, 0.5 * len(rows) + 2))
    ax.bar(range(len(ms)), ms, color="0.35")
    ax.set_xticks(range(len(ms)))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylabel("median wall time [ms]")
    fig.tight_layout()
    save(fig, out)


def locality(rows, out):
    rows = [r for r in rows if r.get("locality_m")]
    labels = [r["label"] for r in rows]
    vals = [float(r["locality_m"]) for r in rows]
    fig, ax = new_figure()
    ax.bar(range(len(vals)), vals, color="tab:blue")
    ax.set_xticks(range(len(vals)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("mean intra-group distance [m]")
    fig.tight_layout()
    save(fig, out)


def bev_norm(bev, out):
    fig, ax = new_figure(5.0, 5.0)
    ax.imshow(np.linalg.norm(bev, axis=2).T, origin="lower", cmap="magma")
    ax.set_xlabel("x cell")
    ax.set_ylabel("y cell")
    save(fig, out)


def plot_csv(in_path, kind, out):
    rows = read_rows(in_path)
    {"scatter-groups": scatter_groups, "latency-bars": latency_bars, "locality": locality}[kind](rows, out)
