"""PNG figures written next to the CSV and key-value outputs."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamp or version in the file, so reruns give identical bytes
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def prediction_scatter(path, true_mos, pred_mos, title="predicted vs true MOS"):
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(true_mos, pred_mos, s=8, alpha=0.6)
    ax.plot([1, 5], [1, 5], color="grey", lw=1, ls="--")
    ax.set(xlim=(0.8, 5.2), xlabel="true MOS", ylabel="predicted MOS", title=title)
    _save(fig, path)


def loss_curve(path, steps, train_loss, dev_steps=(), dev_loss=(), title="training loss"):
    fig, ax = plt.subplots(figsize=(6, 4))
    keep = [(s, v) for s, v in zip(steps, train_loss) if v is not None and math.isfinite(v)]
    if keep:
        s, v = zip(*keep)
        ax.plot(s, v, lw=0.8, alpha=0.7, label="train")
    if len(dev_steps):
        ax.plot(dev_steps, dev_loss, marker="o", ms=3, label="dev")
    ax.set(xlabel="step", ylabel="loss", title=title)
    ax.legend()
    _save(fig, path)


def grouped_bars(path, labels, series: dict, ylabel="SRCC", title=""):
    """One group per label, one bar per entry of ``series`` (name -> values)."""
    fig, ax = plt.subplots(figsize=(max(5, 0.9 * len(labels) + 2), 4))
    width = 0.8 / max(len(series), 1)
    x = np.arange(len(labels))
    for i, (name, values) in enumerate(series.items()):
        ax.bar(x + (i - (len(series) - 1) / 2) * width, values, width, label=name)
    ax.set_xticks(x, labels, rotation=30, ha="right")
    ax.set(ylabel=ylabel, title=title)
    ax.legend()
    _save(fig, path)
