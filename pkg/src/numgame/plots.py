"""Figures rendered from an experiment directory's CSV files only."""

from __future__ import annotations

import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .agents import rasterize  # noqa: E402
from .errors import MissingMetrics  # noqa: E402
from .experiments import METRIC_FILES, read_csv  # noqa: E402

log = logging.getLogger(__name__)

LABELS = {"accuracy": "accuracy", "cond_entropy": "H(N|M) [bits]", "mean_len": "mean message length",
          "loss": "training loss"}


def _save(fig, path_stem: Path) -> List[Path]:
    out = []
    for ext in ("svg", "png"):
        p = path_stem.with_suffix("." + ext)
        fig.savefig(p, dpi=120, bbox_inches="tight", metadata={"Date": None} if ext == "svg" else None)
        out.append(p)
    plt.close(fig)
    return out


def line_plot(csv_path, out_stem, ylabel: str):
    """Mean +/- std over seeds of one metric, one line per cell.

    Returns the written paths, or an empty list (with a logged note) when the
    CSV holds no rows.
    """
    rows = read_csv(csv_path)
    if not rows:
        log.info("%s is empty; plot omitted", csv_path)
        return []
    by_cell: Dict[str, Dict[int, List[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        by_cell[r["cell"]][int(r["epoch"])].append(float(r["value"]))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for cell, by_epoch in by_cell.items():
        ep = np.array(sorted(by_epoch))
        vals = [by_epoch[e] for e in ep]
        mean = np.array([np.mean(v) for v in vals])
        std = np.array([np.std(v) for v in vals])
        ax.plot(ep, mean, label=cell)
        ax.fill_between(ep, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    return _save(fig, Path(out_stem))


def heatmap(csv_path, out_stem, title: str = "", row_label: str = "numerosity"):
    """Matrix CSV (first column = row labels, header = column labels) as a heatmap."""
    rows = read_csv(csv_path)
    if not rows:
        log.info("%s is empty; plot omitted", csv_path)
        return []
    cols = [c for c in rows[0] if c != row_label]
    m = np.array([[float(r[c]) for c in cols] for r in rows])
    fig, ax = plt.subplots(figsize=(max(3, 0.45 * len(cols) + 2), max(2.5, 0.4 * len(rows) + 1.5)))
    im = ax.imshow(m, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(cols)))
    ax.set_xticklabels(cols, rotation=60, fontsize=7, ha="right")
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels([r[row_label] for r in rows], fontsize=8)
    ax.set_ylabel(row_label)
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax)
    return _save(fig, Path(out_stem))


def sketch_grid(csv_by_seed: Dict[int, Path], out_stem, side: int = 64):
    """One row per seed, one column per numerosity, from ``sketches.csv`` files."""
    per_seed = {}
    for seed, path in sorted(csv_by_seed.items()):
        strokes = defaultdict(list)
        for r in read_csv(path):
            strokes[int(r["numerosity"])].append([float(r[k]) for k in ("x0", "y0", "x1", "y1")])
        if strokes:
            per_seed[seed] = strokes
    if not per_seed:
        log.info("no sketches to draw; grid omitted")
        return []
    classes = sorted({c for s in per_seed.values() for c in s})
    fig, axes = plt.subplots(len(per_seed), len(classes), figsize=(1.3 * len(classes), 1.3 * len(per_seed)),
                             squeeze=False)
    for i, (seed, strokes) in enumerate(per_seed.items()):
        for j, c in enumerate(classes):
            ax = axes[i, j]
            ax.set_xticks([])
            ax.set_yticks([])
            if c in strokes:
                with torch.no_grad():
                    img = rasterize(torch.tensor(strokes[c], dtype=torch.float64), side).numpy()
                ax.imshow(img, cmap="gray", vmin=0, vmax=1)
            if i == 0:
                ax.set_title(f"n={c}", fontsize=8)
            if j == 0:
                ax.set_ylabel(f"seed {seed}", fontsize=8)
    return _save(fig, Path(out_stem))


def render_plots(exp_dir) -> List[Path]:
    """Write every figure that the experiment's CSVs support into ``plots/``."""
    exp_dir = Path(exp_dir)
    if not (exp_dir / "accuracy.csv").exists():
        raise MissingMetrics(f"{exp_dir} has no accuracy.csv; run or summarise the experiment first")
    out = exp_dir / "plots"
    out.mkdir(exist_ok=True)
    written: List[Path] = []
    for m in METRIC_FILES:
        p = exp_dir / f"{m}.csv"
        if p.exists():
            written += line_plot(p, out / m, LABELS[m])
    sketches = defaultdict(dict)
    for cell_dir in sorted((exp_dir / "cells").iterdir()):
        for seed_dir in sorted(cell_dir.iterdir()):
            if not seed_dir.is_dir():
                continue
            tag = f"{cell_dir.name}_{seed_dir.name}"
            for csv_path in sorted(seed_dir.glob("mapping*.csv")):
                written += heatmap(csv_path, out / f"{csv_path.stem}_{tag}", f"{cell_dir.name} {seed_dir.name}")
            if (seed_dir / "dissimilarity.csv").exists():
                written += heatmap(seed_dir / "dissimilarity.csv", out / f"dissimilarity_{tag}",
                                   "mean pixel-space distance (16x16)")
            if (seed_dir / "sketches.csv").exists():
                sketches[cell_dir.name][int(seed_dir.name[4:])] = seed_dir / "sketches.csv"
    for cell, by_seed in sketches.items():
        written += sketch_grid(by_seed, out / f"sketches_{cell}")
    return written
