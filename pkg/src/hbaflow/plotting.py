"""Figure output for reports: matplotlib PNGs plus a dependency-free SVG overlay."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

COLORS = ("#4363d8", "#e6194b", "#3cb44b", "#ffe119", "#911eb4")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_loss_curve(history: Sequence[dict], path: str | Path) -> None:
    plt = _pyplot()
    ep = [r["epoch"] for r in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(ep, [r["train_nll"] for r in history], label="train", color=COLORS[0])
    val = [r["val_nll"] for r in history]
    if np.all(np.isfinite(val)):
        ax.plot(ep, val, label="validation", color=COLORS[1])
    ax.set_xlabel("epoch")
    ax.set_ylabel("NLL (nats)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def save_horizon_errors(reports, path: str | Path) -> None:
    """Top-10% error versus horizon, one line per fold plus the aggregate."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for i, r in enumerate(reports):
        agg = r.label == "aggregate"
        ax.plot(r.horizons_sec, r.top_errors, marker="o",
                color="k" if agg else COLORS[i % len(COLORS)],
                lw=2 if agg else 1, alpha=1 if agg else 0.6, label=r.label)
    ax.set_xlabel("horizon (s)")
    ax.set_ylabel("top-10% error")
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def svg_overlay(observed: np.ndarray, samples: np.ndarray, gt: np.ndarray | None = None,
                size: int = 400) -> str:
    """One polyline per sample, plus observed and ground-truth polylines."""
    groups = [np.asarray(observed)] + [np.asarray(s) for s in samples]
    if gt is not None:
        groups.append(np.asarray(gt))
    pts = np.concatenate(groups)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
    pad = 0.05 * span
    vb = (lo[0] - pad, -(hi[1] + pad), span + 2 * pad, span + 2 * pad)

    def poly(p, color, width, cls):
        coords = " ".join(f"{x:.5g},{-y:.5g}" for x, y in p)
        return (f'<polyline class="{cls}" points="{coords}" fill="none" stroke="{color}" '
                f'stroke-width="{width * span / size:.4g}"/>')

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="{vb[0]:.5g} {vb[1]:.5g} {vb[2]:.5g} {vb[3]:.5g}">']
    for s in samples:
        out.append(poly(np.asarray(s), COLORS[1], 1, "sample"))
    out.append(poly(np.asarray(observed), "#000000", 2, "observed"))
    if gt is not None:
        out.append(poly(np.asarray(gt), COLORS[0], 2, "gt"))
    out.append("</svg>")
    return "\n".join(out) + "\n"
