"""Report figures rendered straight to files (no interactive backend)."""

from __future__ import annotations

import numpy as np
from matplotlib.figure import Figure

from salient_align.evaluation import COLUMNS, EvaluationResult

COLUMN_LABELS = {"csp": "CSP", "lv": "LV / Cereb.", "hc": "HC center"}
METHOD_COLORS = {
    "None": "#9e9e9e",
    "LR": "#6baed6",
    "LR+Intensity": "#2171b5",
    "SalientLM": "#d94801",
}
CLUSTER_COLORS = ("#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00", "#a65628")
PNG_META = {"Software": None}


def _save(fig: Figure, path) -> None:
    fig.savefig(path, dpi=120, metadata=PNG_META)


def plot_errors(result: EvaluationResult, path) -> None:
    """Grouped bars of mean error (± standard error) per method, one panel per plane."""
    planes = sorted({r.plane for r in result.reports})
    fig = Figure(figsize=(4.2 * max(len(planes), 1), 3.4))
    axes = fig.subplots(1, max(len(planes), 1), squeeze=False)[0]
    x = np.arange(len(COLUMNS))
    for ax, plane in zip(axes, planes):
        reps = [r for r in result.reports if r.plane == plane]
        width = 0.8 / max(len(reps), 1)
        for i, rep in enumerate(reps):
            ax.bar(x + (i - (len(reps) - 1) / 2) * width, np.nan_to_num(rep.mean()), width,
                   yerr=np.nan_to_num(rep.sem()), capsize=2, label=rep.method,
                   color=METHOD_COLORS.get(rep.method))
        ax.set_xticks(x)
        ax.set_xticklabels([COLUMN_LABELS[c] for c in COLUMNS])
        ax.set_title(f"{plane} ({reps[0].pair_count if reps else 0} pairs)")
        ax.set_ylabel("error [% HC long axis]")
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
    if planes:
        axes[0].legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_landmarks(image, saliency, landmarks, path, annotations=None) -> None:
    """Image with the saliency grid overlaid and landmarks marked by cluster."""
    fig = Figure(figsize=(5, 4))
    ax = fig.subplots()
    sal = np.asarray(getattr(saliency, "values", saliency))
    if image is not None:
        img = np.asarray(image)
        h, w = img.shape
        ax.imshow(img, cmap="gray", vmin=0, vmax=1, extent=(0, w, h, 0))
        ax.imshow(sal, cmap="inferno", alpha=0.45, extent=(0, w, h, 0), interpolation="bilinear")
    else:
        h, w = sal.shape
        ax.imshow(sal, cmap="inferno", extent=(0, w, h, 0))
    for lm in landmarks.landmarks:
        pos = lm.pixel_pos if image is not None else (lm.grid_pos[0] + 0.5, lm.grid_pos[1] + 0.5)
        color = "w" if lm.cluster is None else CLUSTER_COLORS[lm.cluster % len(CLUSTER_COLORS)]
        ax.plot(*pos, "o", mfc="none", mec=color, ms=9, mew=1.5)
        if lm.cluster is not None:
            ax.annotate(str(lm.cluster), pos, xytext=(6, -6), textcoords="offset points",
                        color=color, fontsize=8)
    if annotations is not None and image is not None:
        ax.plot(*annotations.csp_center, "s", mfc="none", mec="c", ms=7)
        (x1, y1), (x2, y2) = annotations.segment
        ax.plot([x1, x2], [y1, y2], "c-", lw=1)
    ax.set_title(landmarks.image_id)
    ax.set_axis_off()
    fig.tight_layout()
    _save(fig, path)


def plot_alignment(target, warped, path, title: str = "") -> None:
    """Target in green, warped source in magenta; aligned structures turn gray."""
    t = np.clip(np.asarray(target, dtype=np.float64), 0, 1)
    s = np.clip(np.asarray(warped, dtype=np.float64), 0, 1)
    rgb = np.dstack([s, t, s])
    fig = Figure(figsize=(5, 4))
    ax = fig.subplots()
    ax.imshow(rgb)
    ax.set_title(title)
    ax.set_axis_off()
    fig.tight_layout()
    _save(fig, path)


def save_gray(image, path) -> None:
    fig = Figure(figsize=(image.shape[1] / 100, image.shape[0] / 100), dpi=100)
    ax = fig.add_axes((0, 0, 1, 1))
    ax.imshow(np.clip(image, 0, 1), cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    ax.set_axis_off()
    fig.savefig(path, dpi=100, metadata=PNG_META)
