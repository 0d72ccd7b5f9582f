"""Figures for run reports. Everything renders off-screen to PNG files."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({"figure.dpi": 110, "axes.grid": True, "grid.alpha": 0.3, "font.size": 9})


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def _series(records: Sequence[dict], section: str, key: str):
    xs, ys = [], []
    for r in records:
        v = r.get(section, {}).get(key)
        if v is not None:
            xs.append(r["step"])
            ys.append(v)
    return np.array(xs), np.array(ys)


def plot_training_curves(records: Sequence[dict], path, title: str = "") -> Path:
    """Training loss components (log scale) and held-out metrics against step."""
    train_keys = sorted({k for r in records for k in r.get("train", {}) if "." not in k and k != "grad_norm"})
    eval_keys = [k for k in ("accuracy", "top1_agreement", "logit_kl") if any(k in r.get("eval", {}) for r in records)]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for k in train_keys:
        x, y = _series(records, "train", k)
        if len(x) and np.all(y > 0):
            axes[0].semilogy(x, y, label=k)
        elif len(x):
            axes[0].plot(x, y, label=k)
    axes[0].set_xlabel("step")
    axes[0].set_title("training loss")
    if train_keys:
        axes[0].legend(fontsize=7)
    for k in eval_keys:
        x, y = _series(records, "eval", k)
        axes[1].plot(x, y, marker="o", ms=3, label=k)
    axes[1].set_xlabel("step")
    axes[1].set_title("held-out")
    if eval_keys:
        axes[1].legend(fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_spectra(spectra: dict[str, np.ndarray], ranks: dict[str, int], path, title: str = "") -> Path:
    """Singular values and cumulative retained energy per matrix, with the chosen rank marked."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for name, s in spectra.items():
        idx = np.arange(1, len(s) + 1)
        (line,) = axes[0].semilogy(idx, np.maximum(s, 1e-16), lw=1, label=name)
        energy = np.cumsum(s**2) / np.sum(s**2)
        axes[1].plot(idx, energy, lw=1, color=line.get_color())
        k = ranks.get(name)
        if k:
            axes[1].plot([k], [energy[k - 1]], "o", ms=3, color=line.get_color())
    axes[0].set_xlabel("index")
    axes[0].set_title("singular values")
    axes[1].set_xlabel("rank")
    axes[1].set_title("retained energy")
    if len(spectra) <= 12:
        axes[0].legend(fontsize=6)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_bars(values: dict[str, float], path, title: str = "", ylabel: str = "") -> Path:
    """One bar per named scalar, e.g. per-layer attention KL."""
    fig, ax = plt.subplots(figsize=(max(3.5, 0.5 * len(values) + 1.5), 3.2))
    names = list(values)
    ax.bar(range(len(names)), [values[n] for n in names], color="tab:blue")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_grouped(groups: dict[str, Iterable[float]], path, title: str = "", ylabel: str = "") -> Path:
    """Per-group points with the group mean, e.g. one metric over seeds for each variant."""
    fig, ax = plt.subplots(figsize=(max(3.5, 0.9 * len(groups) + 1.5), 3.2))
    for i, (name, vals) in enumerate(groups.items()):
        vals = np.asarray(list(vals), dtype=float)
        ax.plot(np.full(len(vals), i), vals, "o", ms=4, alpha=0.7, color="tab:gray")
        ax.plot([i - 0.25, i + 0.25], [vals.mean()] * 2, color="tab:red", lw=2)
    ax.set_xticks(range(len(groups)), list(groups), rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path
