"""Report figures (Agg backend, PNG files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}
# Fixed metadata keeps PNG bytes reproducible across runs.
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def plot_history(rows: list[dict], path, title: str = "patch crafting") -> None:
    """Loss terms per iteration, with mAP probes on a twin axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        it = np.array([r["iteration"] for r in rows], dtype=float)
        for key, style in (("total", "-"), ("det", "--"), ("sim_effective", ":"), ("tv", "-.")):
            ax.plot(it, [float(r[key]) for r in rows], style, lw=1.0, label=key)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        probes = [(r["iteration"], float(r["map_probe"])) for r in rows if r.get("map_probe") not in ("", None)]
        if probes:
            ax2 = ax.twinx()
            px, py = zip(*probes)
            ax2.plot(px, py, "o-", color="k", ms=3, lw=0.8, label="mAP probe")
            ax2.set_ylabel("mAP (%)")
            ax2.set_ylim(0, 105)
            ax2.legend(loc="upper right")
        ax.legend(loc="upper left", ncol=2)
        ax.set_title(title)
        _save(fig, path)


def plot_pr(curves: dict[str, list[tuple[float, float]]], path, title: str = "precision-recall") -> None:
    """One step curve per label; ``curves[label]`` is a list of (recall, precision)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        for label, pts in curves.items():
            if pts:
                r, p = zip(*pts)
                ax.step((0.0,) + r, (p[0],) + p, where="post", lw=1.2, label=label)
            else:
                ax.plot([], [], label=f"{label} (no detections)")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(title)
        ax.legend(loc="lower left")
        _save(fig, path)


def plot_sweep(rows: list[dict], varied: list[str], path, title: str = "sweep") -> None:
    """mAP and ASR bars per grid cell, labelled by the varied keys."""
    with plt.rc_context(STYLE):
        labels = ["\n".join(f"{k}={r[k]}" for k in varied) or "base" for r in rows]
        x = np.arange(len(rows))
        fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(rows) + 1.5), 3.8))
        ax.bar(x - 0.2, [r["map"] for r in rows], 0.4, label="mAP (%)")
        ax.bar(x + 0.2, [r["asr"] for r in rows], 0.4, label="ASR (%)")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_ylim(0, 105)
        ax.legend()
        ax.set_title(title)
        _save(fig, path)


def plot_curve(rows: list[dict], path, title: str = "detector training") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        ep = [r["epoch"] for r in rows]
        ax.plot(ep, [r["loss"] for r in rows], lw=1.0, label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        vals = [(r["epoch"], r["val_map"]) for r in rows if r.get("val_map") not in ("", None)]
        if vals:
            ax2 = ax.twinx()
            ex, ey = zip(*vals)
            ax2.plot(ex, ey, "o-", color="k", ms=3, lw=0.8)
            ax2.set_ylabel("val mAP (%)")
            ax2.set_ylim(0, 105)
        ax.set_title(title)
        _save(fig, path)
