"""Report figures written next to the text outputs (Agg backend, PNG)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings so reruns stay byte-identical
_SAVE = dict(dpi=100, metadata={"Software": None})


def _masked(values, valid):
    return np.ma.masked_array(np.asarray(values, float), mask=~np.asarray(valid, bool))


def _save(fig, path):
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def refine_figure(path, base, offset, composed, trace, title=""):
    """Base depth, detail offset (cm), composed depth and the loss trace."""
    valid = base.valid
    fig, axes = plt.subplots(2, 2, figsize=(8, 7))
    lo, hi = (np.nanmin(base.values[valid]), np.nanmax(base.values[valid])) if valid.any() else (0, 1)
    for ax, data, name in ((axes[0, 0], base.values, "base depth [m]"),
                           (axes[1, 0], composed.values, "composed depth [m]")):
        im = ax.imshow(_masked(data, valid), cmap="viridis", vmin=lo, vmax=hi)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    off = 100.0 * np.asarray(offset, float)
    lim = max(float(np.max(np.abs(off[valid]))) if valid.any() else 0.0, 1e-3)
    im = axes[0, 1].imshow(_masked(off, valid), cmap="RdBu_r", vmin=-lim, vmax=lim)
    axes[0, 1].set_title("detail offset [cm]", fontsize=9)
    axes[0, 1].axis("off")
    fig.colorbar(im, ax=axes[0, 1], fraction=0.046)

    ax = axes[1, 1]
    it = np.arange(len(trace))
    ax.plot(it, [b.total for b in trace], "k-", lw=1.2, label="total")
    ax.plot(it, [b.photo for b in trace], "C0--", lw=0.8, label="photo")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    ax.spines[["top", "right"]].set_visible(False)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    _save(fig, path)


def eval_figure(path, rows, thresholds):
    """Cumulative error curves, one per ``(label, errors)`` row, with threshold marks."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    top = max(float(np.max(e)) for _, e in rows if len(e)) if rows else 0.05
    top = max(top, max(thresholds) * 1.5)
    grid = np.linspace(0.0, top, 400)
    for k, (label, err) in enumerate(rows):
        err = np.sort(np.asarray(err, float))
        frac = 100.0 * np.searchsorted(err, grid, side="left") / max(len(err), 1)
        ax.plot(100.0 * grid, frac, color=f"C{k}", lw=1.2, label=label)
    for t in thresholds:
        ax.axvline(100.0 * t, color="0.6", lw=0.6, ls=":")
    ax.set_xlabel("nearest-neighbor error [cm]")
    ax.set_ylabel("points below error [%]")
    ax.set_ylim(0, 101)
    ax.spines[["top", "right"]].set_visible(False)
    ax.legend(frameon=False, fontsize=8, loc="lower right")
    fig.tight_layout()
    _save(fig, path)
