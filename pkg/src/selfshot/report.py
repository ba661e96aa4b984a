"""Static figures and text tables from saved evaluation reports."""
from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport  # noqa: E402

plt.rcParams["svg.hashsalt"] = "selfshot"
_POOL_CELL = re.compile(r"^pool(\d+)_selfshot_k(\d+)$")


def load_reports(directory) -> dict[str, EvalReport]:
    out = {}
    for p in sorted(Path(directory).glob("*.json")):
        doc = json.loads(p.read_text(encoding="utf-8"))
        if not isinstance(doc, dict) or "schema" not in doc:
            continue
        out[doc.get("tag") or p.stem] = EvalReport.from_dict(doc)
    return out


def _save(fig, stem: Path) -> list[Path]:
    paths = [stem.with_suffix(".png"), stem.with_suffix(".svg")]
    fig.savefig(paths[0], dpi=120, metadata={"Software": None})
    fig.savefig(paths[1], metadata={"Date": None})
    plt.close(fig)
    return paths


def plot_pr_curves(reports: Mapping[str, EvalReport], stem) -> list[Path]:
    fig, ax = plt.subplots(figsize=(5, 4))
    for name in sorted(reports):
        prec, rec = reports[name].pr_curve()
        if len(prec) == 0:
            continue
        ax.step(np.concatenate([[0], rec]), np.concatenate([[prec[0]], prec]), where="post",
                label=f"{name} (mAP {reports[name].mAP:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=6, loc="lower left")
    fig.tight_layout()
    return _save(fig, Path(stem))


def scaling_points(reports: Mapping[str, EvalReport]) -> list[tuple[int, float]]:
    pts = []
    for name, rep in reports.items():
        m = _POOL_CELL.match(name)
        if m:
            pts.append((int(m.group(1)), rep.mAP))
    return sorted(pts)


def plot_scaling(reports: Mapping[str, EvalReport], stem) -> list[Path]:
    pts = scaling_points(reports)
    if not pts:
        raise ValueError("no pool-size cells (pool<N>_selfshot_k<k>) among the reports")
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    xs, ys = zip(*pts)
    ax.plot(xs, ys, marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("unlabelled pool size")
    ax.set_ylabel("self-shot mAP")
    fig.tight_layout()
    return _save(fig, Path(stem))


def plot_heatmaps(frames: np.ndarray, before: np.ndarray, after: np.ndarray, stem) -> list[Path]:
    """Query frames with the top slot's attention before and after fusing with supports."""
    T = frames.shape[0]
    fig, axes = plt.subplots(3, T, figsize=(1.6 * T, 5), squeeze=False)
    for t in range(T):
        axes[0, t].imshow(frames[t])
        axes[1, t].imshow(before[t], cmap="viridis")
        axes[2, t].imshow(after[t], cmap="viridis")
        for r in range(3):
            axes[r, t].axis("off")
    axes[0, 0].set_title("frames", fontsize=7, loc="left")
    axes[1, 0].set_title("before fusing", fontsize=7, loc="left")
    axes[2, 0].set_title("after fusing", fontsize=7, loc="left")
    fig.tight_layout()
    return _save(fig, Path(stem))
