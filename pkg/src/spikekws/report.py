"""Machine-readable run outputs and their rendered figures.

Training and profiling both emit JSON-lines plus CSV next to a PNG
rendering, so runs can be inspected without re-loading anything into
Python.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .energy import EnergyReport


def write_jsonl(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(records: list[dict], path) -> None:
    if not records:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(records[0].keys()))
        writer.writeheader()
        writer.writerows(records)


def plot_training_curves(metrics: list[dict], path) -> None:
    """Loss and accuracy per epoch, train vs validation."""
    epochs = [m["epoch"] for m in metrics]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [m["train_loss"] for m in metrics], label="train")
    ax_loss.plot(epochs, [m["val_loss"] for m in metrics], label="val")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.plot(epochs, [m["train_acc"] for m in metrics], label="train")
    ax_acc.plot(epochs, [m["val_acc"] for m in metrics], label="val")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_layer_energy(report: EnergyReport, path) -> None:
    """Horizontal bars of per-layer estimated energy, grouped by color."""
    layers = report.layers
    names = [l.name for l in layers]
    energies = [l.energy_mj for l in layers]
    colors = ["tab:orange" if l.group == "attention" else "tab:blue" for l in layers]
    fig, ax = plt.subplots(figsize=(8, max(3, 0.28 * len(layers))))
    ax.barh(range(len(layers)), energies, color=colors)
    ax.set_yticks(range(len(layers)))
    ax.set_yticklabels(names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("estimated energy (mJ)")
    ax.set_title(f"total {report.total_mj:.6f} mJ")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
