"""Report figures rendered next to the delimited text outputs.

All figures go through the Agg backend and are written without embedded
timestamps so repeated runs produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .inference import PointTrack
from .metrics import EvalReport

_SAVE_KW = {"dpi": 110, "metadata": {"Software": None}}


def _save(fig, path: str) -> None:
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_loss_curves(log_path: str, out_png: str) -> None:
    """Loss-log lines are `step,kl,rec,adv,total,valid`."""
    rows = np.loadtxt(log_path, delimiter=",", ndmin=2)
    steps = rows[:, 0]
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for col, name in ((1, "kl"), (2, "rec"), (3, "adv"), (4, "total")):
        if np.any(rows[:, col] != 0):
            ax.plot(steps, rows[:, col], label=name, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, out_png)


def plot_metric_bars(reports: list[EvalReport], out_png: str) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    names = [f"{r.name}\n({r.mode})" for r in reports]
    values = [r.value for r in reports]
    ax.bar(np.arange(len(reports)), values, color="#4878cf")
    ax.set_xticks(np.arange(len(reports)))
    ax.set_xticklabels(names, fontsize=7)
    for i, (rep, val) in enumerate(zip(reports, values)):
        ax.text(i, val, f"{val:.3f}", ha="center", va="bottom", fontsize=7)
    ax.set_ylabel("value")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, out_png)


def plot_tracks(frame0: np.ndarray, tracks: list[PointTrack], out_png: str) -> None:
    """Trajectories over the first frame; marker hue encodes time order."""
    fig, ax = plt.subplots(figsize=(4.6, 4.6))
    ax.imshow(np.clip(frame0, 0, 1))
    cmap = plt.get_cmap("spring")
    for track in tracks:
        t_count = track.positions.shape[0]
        for t in range(t_count):
            color = cmap(t / max(t_count - 1, 1))
            marker = "o" if track.visible[t] else "x"
            # positions are (row, col); imshow axes are (x=col, y=row)
            ax.plot(track.positions[t, 1], track.positions[t, 0], marker, color=color, markersize=3)
        ax.plot(track.positions[:, 1], track.positions[:, 0], "-", color="white", alpha=0.4, linewidth=0.7)
    ax.set_axis_off()
    fig.tight_layout()
    _save(fig, out_png)
