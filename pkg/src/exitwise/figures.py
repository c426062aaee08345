"""Figure rendering for reports: every report path can drop PNGs next to its
delimited output. Uses the Agg backend so headless runs never touch a display.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finish(fig, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return str(path)


def uar_bars(per_exit: dict[str, float], path, title: str = "UAR by exit") -> str:
    names = list(per_exit)
    values = [per_exit[n] for n in names]
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(names), 3.2))
    ax.bar(names, values, color="#4878a8")
    ax.set_ylabel("UAR [%]")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    for i, v in enumerate(values):
        ax.text(i, v + 1, f"{v:.1f}", ha="center", fontsize=8)
    return _finish(fig, path)


def confusion_heatmap(counts, class_names: list[str], path, title: str) -> str:
    counts = np.asarray(counts)
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(len(class_names)), class_names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title, fontsize=9)
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            if counts[i, j]:
                ax.text(j, i, str(counts[i, j]), ha="center", va="center", fontsize=6,
                        color="white" if counts[i, j] > counts.max() / 2 else "black")
    fig.colorbar(im, ax=ax, shrink=0.8)
    return _finish(fig, path)


def loss_curves(records: list[dict], path) -> str:
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for key, label in [("total", "total"), ("ce_teacher", "teacher CE"),
                       ("ce_exits", "exit CE"), ("kl", "KL"), ("sim", "similarity")]:
        series = [r["loss"][key] for r in records]
        if any(v != 0.0 for v in series):
            ax.plot(epochs, series, label=label, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    ax.set_title("training loss terms")
    return _finish(fig, path)


def uar_curves(records: list[dict], path) -> str:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    names = sorted({n for r in records for n in (r.get("uar_dev") or {})})
    for name in names:
        xs = [r["epoch"] for r in records if r.get("uar_dev")]
        ys = [r["uar_dev"][name] for r in records if r.get("uar_dev")]
        ax.plot(xs, ys, label=name, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("dev UAR [%]")
    ax.legend(fontsize=7)
    ax.set_title("dev UAR per exit")
    return _finish(fig, path)


def depth_sweep(rows: list[dict], path, title: str = "single-exit sweep") -> str:
    """Rows carry {"layer": int, "exit_dev": float, "teacher_dev": float, ...}."""
    layers = [r["layer"] for r in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for key, label, style in [("exit_dev", "exit (dev)", "o-"), ("teacher_dev", "teacher (dev)", "s--"),
                              ("exit_test", "exit (test)", "^-"), ("teacher_test", "teacher (test)", "d--")]:
        if all(key in r for r in rows):
            ax.plot(layers, [r[key] for r in rows], style, label=label, linewidth=1.2, markersize=4)
    ax.set_xlabel("exit depth (transformer layer)")
    ax.set_ylabel("UAR [%]")
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _finish(fig, path)


def sweep_grid(rows: list[dict], exit_names: list[str], path, title: str) -> str:
    """Dev UAR per exit across grid points; rows carry {"label", "<name>_dev"}."""
    labels = [r["label"] for r in rows]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(labels), 3.4))
    for name in exit_names:
        key = f"{name}_dev"
        if all(key in r for r in rows):
            ax.plot(x, [r[key] for r in rows], "o-", label=name, linewidth=1.2, markersize=4)
    ax.set_xticks(x, labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("dev UAR [%]")
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _finish(fig, path)


def latency_bars(table: dict[str, dict], path) -> str:
    names = list(table)
    med = [table[n]["median_us"] / 1000.0 for n in names]
    p95 = [table[n]["p95_us"] / 1000.0 for n in names]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.4 + 0.9 * len(names), 3.2))
    ax.bar(x - 0.18, med, width=0.36, label="median")
    ax.bar(x + 0.18, p95, width=0.36, label="p95")
    ax.set_xticks(x, names)
    ax.set_ylabel("latency [ms]")
    ax.set_title("per-exit inference latency")
    ax.legend(fontsize=8)
    return _finish(fig, path)
