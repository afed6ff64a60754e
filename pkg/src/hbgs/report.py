"""Figures written next to the JSON outputs."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def smooth(values, window=100):
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    head = c[1:window] / np.arange(1, window)
    return np.concatenate([head, (c[window:] - c[:-window]) / window])


def plot_training(history, path):
    """Total loss and its components per step, plus pose error when logged."""
    steps = [r["step"] for r in history]
    has_pose = bool(history) and "rot_err_deg" in history[0]
    fig, axes = plt.subplots(1, 2 if has_pose else 1, figsize=(10 if has_pose else 5, 3.5), squeeze=False)
    ax = axes[0, 0]
    for key in ("total", "l1", "ssim_term"):
        ax.plot(steps, smooth([r[key] for r in history]), label=key)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss (window-100 mean)")
    ax.legend()
    if has_pose:
        ax = axes[0, 1]
        ax.plot(steps, [r["rot_err_deg"] for r in history], label="rotation [deg]")
        ax2 = ax.twinx()
        ax2.plot(steps, [r["trans_err"] for r in history], color="C1", label="translation")
        ax.set_xlabel("step")
        ax.set_ylabel("mean rotation error [deg]")
        ax2.set_ylabel("mean translation error")
    _save(fig, path)


def plot_registration(rows, path):
    """Per-view pose error before and after registration."""
    names = [r["name"] for r in rows]
    x = np.arange(len(rows))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, key, label in ((axes[0], "rot_err", "rotation error [deg]"), (axes[1], "trans_err", "translation error [% extent]")):
        suffix = "_deg" if key == "rot_err" else "_pct"
        ax.bar(x - 0.2, [r[f"{key}_before{suffix}"] for r in rows], 0.4, label="before")
        ax.bar(x + 0.2, [r[f"{key}_after{suffix}"] for r in rows], 0.4, label="after")
        ax.set_xticks(x, names, rotation=30, ha="right")
        ax.set_ylabel(label)
        ax.legend()
    _save(fig, path)


def plot_ablation(rows, path):
    """Held-out PSNR per ablation row, seeds as dots."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.arange(len(rows))
    ax.bar(x, [r["psnr"] for r in rows], 0.6, color="0.7")
    for i, r in enumerate(rows):
        ax.plot([i] * len(r["seeds"]), [s["psnr"] for s in r["seeds"]], "k.")
    lo = min(s["psnr"] for r in rows for s in r["seeds"])
    hi = max(s["psnr"] for r in rows for s in r["seeds"])
    ax.set_ylim(lo - 1.0, hi + 0.5)
    ax.set_xticks(x, [r["name"] for r in rows])
    ax.set_ylabel("held-out PSNR [dB]")
    _save(fig, path)
