"""Static figures from a run directory."""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import yaml  # noqa: E402

from .diagnostics import read_stats  # noqa: E402


def read_snapshot(path):
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    x, truth, mean = body[:, 0], body[:, 1], body[:, 2]
    return x, truth, mean, body[:, 3:].T


def plot_snapshot(path, out, title=None, obs_extent=None):
    x, truth, mean, ens = read_snapshot(path)
    L = x[1] - x[0] + x[-1]
    xs = np.append(x, L)
    wrap = lambda v: np.append(v, v[0])  # noqa: E731
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for p in ens:
        ax.plot(xs, wrap(p), color="gold", lw=0.6, alpha=0.6)
    ax.plot(xs, wrap(mean), color="darkorange", lw=1.5, label="ensemble mean")
    ax.plot(xs, wrap(truth), color="tab:blue", lw=1.5, label="truth")
    if obs_extent is not None and obs_extent < L:
        ax.axvspan(0, obs_extent, color="grey", alpha=0.1, label="observed")
    ax.set_xlabel("x")
    ax.set_ylabel("u")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)


def plot_stats(stats_csv, out, title=None):
    s = read_stats(stats_csv)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key, label in (("emre", "EMRE"), ("rb", "RB"), ("res", "RES")):
        ax.plot(s["step"], s[key], lw=1.0, label=label)
    ax.set_xlabel("assimilation step")
    ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)


def plot_run(run_dir):
    """Write ``stats.png`` and one ``ensemble_XXXX.png`` per snapshot."""
    run_dir = Path(run_dir)
    cfg = yaml.safe_load((run_dir / "config.yaml").read_text())
    label = f"experiment {cfg['experiment']}, {cfg['mode']}"
    written = [run_dir / "stats.png"]
    plot_stats(run_dir / "diagnostics.csv", written[0], title=label)
    for snap in sorted(run_dir.glob("snapshot_*.csv")):
        step = int(snap.stem.split("_")[1])
        target = run_dir / f"ensemble_{step:04d}.png"
        plot_snapshot(snap, target, title=f"{label}, DA step {step}",
                      obs_extent=cfg.get("obs_extent"))
        written.append(target)
    return written
