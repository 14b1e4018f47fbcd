"""Diagnostic plots from stored epoch reports and target features."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import pca_projection  # noqa: E402

logger = logging.getLogger(__name__)

FIGURE_KINDS = ("mi", "lost_ids", "pca")


def _series(reports, key: str):
    epochs, values = [], []
    for r in reports:
        value = r.diagnostics.get(key)
        if value is not None:
            epochs.append(r.epoch)
            values.append(value)
    return epochs, values


def _write_series(path: Path, columns: dict) -> None:
    keys = list(columns)
    length = max((len(v) for v in columns.values()), default=0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for i in range(length):
            writer.writerow([columns[k][i] if i < len(columns[k]) else "" for k in keys])


def _curve(runs: Mapping[str, list], key: str, ylabel: str, out: Path, baseline_key: Optional[str] = None) -> list:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    data: dict = {}
    for name, reports in runs.items():
        epochs, values = _series(reports, key)
        data[name] = {"epoch": epochs, key: values}
        line = ax.plot(epochs, values, marker="o", label=name)[0]
        if baseline_key is None:
            continue
        b_epochs, b_values = _series(reports, baseline_key)
        if b_values:
            data[name][baseline_key] = b_values
            ax.plot(b_epochs, b_values, linestyle="--", color=line.get_color(), label=f"{name} (ground-truth IDs)")
        else:
            logger.info("%s: no ground-truth diagnostic channel; dashed baseline omitted", name)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out.with_suffix(".png"), metadata={"Software": None})
    plt.close(fig)
    (out.with_suffix(".json")).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    columns = {}
    for name, d in data.items():
        for col, values in d.items():
            columns[f"{name}.{col}"] = values
    _write_series(out.with_suffix(".csv"), columns)
    return [out.with_suffix(s) for s in (".png", ".json", ".csv")]


def _pca(features: np.ndarray, cameras: np.ndarray, pair: Sequence[int], out: Path) -> list:
    a, b = pair
    mask = (cameras == a) | (cameras == b)
    if mask.sum() <= 2:
        logger.warning("camera pair %s has too few samples for a projection", pair)
        return []
    points, ratio, labels = pca_projection(features[mask], cameras[mask])
    fig, ax = plt.subplots(figsize=(4, 4))
    for cam, color in zip((a, b), ("tab:blue", "tab:orange")):
        sel = labels == cam
        ax.scatter(points[sel, 0], points[sel, 1], s=8, color=color, label=f"camera {cam}")
    ax.set_xlabel(f"PC1 ({ratio[0]:.0%})")
    ax.set_ylabel(f"PC2 ({ratio[1]:.0%})")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out.with_suffix(".png"), metadata={"Software": None})
    plt.close(fig)
    _write_series(
        out.with_suffix(".csv"),
        {"pc1": points[:, 0].tolist(), "pc2": points[:, 1].tolist(), "camera": labels.tolist()},
    )
    return [out.with_suffix(".png"), out.with_suffix(".csv")]


def emit_figures(
    runs: Mapping[str, list],
    out_dir: Path,
    kinds: Sequence[str] = FIGURE_KINDS,
    *,
    features: Optional[np.ndarray] = None,
    cameras: Optional[np.ndarray] = None,
    camera_pairs: Sequence[Sequence[int]] = ((0, 1),),
) -> list:
    """Write MI and lost-ID curves (one line per run) and per-camera-pair PCA scatters.

    Each figure comes with its data series as CSV (and JSON for curves), so
    re-emission can be compared byte for byte.
    """
    if not runs or not any(runs.values()):
        raise ValueError("no epoch reports to plot")
    unknown = set(kinds) - set(FIGURE_KINDS)
    if unknown:
        raise ValueError(f"unknown figure kind(s) {sorted(unknown)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "mi" in kinds:
        written += _curve(
            runs, "mutual_information_nats", "MI(pseudo label; camera) [nats]", out_dir / "mi_curve", "gt_mutual_information"
        )
    if "lost_ids" in kinds:
        written += _curve(runs, "lost_ids", "lost identities", out_dir / "lost_ids_curve")
    if "pca" in kinds:
        if features is None or cameras is None:
            logger.warning("no stored target features; PCA scatter skipped")
        else:
            for pair in camera_pairs:
                written += _pca(np.asarray(features), np.asarray(cameras), pair, out_dir / f"pca_cam{pair[0]}_{pair[1]}")
    return written
