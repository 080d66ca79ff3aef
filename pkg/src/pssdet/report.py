"""Figures for training logs, ablation tables and score heatmaps.

Everything renders off-screen with the Agg backend, straight to PNG files.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_TERMS = ("l_cls", "l_reg", "l_ctr", "l_pss", "l_rank")

plt.rcParams.update({
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
})


def _smooth(values, window):
    if len(values) < window or window <= 1:
        return np.asarray(values, dtype=float)
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def training_curves(rows: list[dict], path, window: int = 20) -> None:
    """Per-term losses (moving average) over steps, learning rate underneath."""
    steps = np.array([int(r["step"]) for r in rows])
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(6.4, 5.2), sharex=True,
                                    gridspec_kw={"height_ratios": [3, 1]})
    for term in LOSS_TERMS:
        vals = np.array([float(r[term]) for r in rows])
        if not np.any(vals):
            continue
        sm = _smooth(vals, window)
        ax.plot(steps[len(steps) - len(sm):], sm, label=term, lw=1.2)
    # phase boundaries of two-step runs
    for a, b in zip(rows, rows[1:]):
        if a["phase"] != b["phase"]:
            for axis in (ax, ax_lr):
                axis.axvline(int(b["step"]), color="0.6", ls="--", lw=0.8)
    ax.set_yscale("log")
    ax.set_ylabel("loss (moving avg)")
    ax.legend(ncol=3, fontsize=8)
    ax_lr.plot(steps, [float(r["lr"]) for r in rows], color="k", lw=1)
    ax_lr.set_yscale("log")
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def ablation_bars(title: str, labels: list[str], ap_free: list, ap_nms: list, path) -> None:
    """Grouped bars: NMS-free AP next to one-to-many+NMS AP for each sweep cell.

    ``None`` entries (e.g. a model without a PSS head has no NMS-free path)
    are left blank.
    """
    x = np.arange(len(labels))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(labels) + 1.5), 3.4))
    for offset, values, name, color in ((-width / 2, ap_free, "AP w/o NMS", "#3465a4"),
                                        (width / 2, ap_nms, "AP w/ NMS", "#c17d11")):
        heights = [100 * v if v is not None else 0.0 for v in values]
        bars = ax.bar(x + offset, heights, width, label=name, color=color)
        for bar, v in zip(bars, values):
            if v is not None:
                ax.annotate(f"{100 * v:.1f}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                            ha="center", va="bottom", fontsize=7, xytext=(0, 1), textcoords="offset points")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20 if len(labels) > 4 else 0, ha="right" if len(labels) > 4 else "center")
    ax.set_ylabel("mAP (%)")
    ax.set_ylim(0, 105)
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def heatmap_png(values: np.ndarray, path, title: str = "", image: np.ndarray | None = None) -> None:
    """Score map on its own, or beside the input image when one is given."""
    ncols = 2 if image is not None else 1
    fig, axes = plt.subplots(1, ncols, figsize=(3.2 * ncols, 3.2), squeeze=False)
    if image is not None:
        axes[0, 0].imshow(np.clip(np.transpose(image, (1, 2, 0)), 0, 1), interpolation="nearest")
        axes[0, 0].set_title("input")
    ax = axes[0, -1]
    im = ax.imshow(values, cmap="magma", vmin=0.0, vmax=max(float(values.max()), 1e-12), interpolation="nearest")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    for a in axes.ravel():
        a.set_xticks([])
        a.set_yticks([])
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
