"""Report figures: training curves and ablation bar charts, rendered to PNG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import PipelineIOError  # noqa: E402

LOSS_COLUMNS = ("l_total", "l_sim", "l_det")


def _save(fig, out_path, config_hash=None):
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_path, dpi=100, metadata={"Description": f"config_hash={config_hash}"})
    except OSError as exc:
        raise PipelineIOError("cannot write figure", out_path) from exc
    finally:
        plt.close(fig)
    return out_path


def plot_training_curves(rows: list[dict], out_path, config_hash=None) -> Path:
    """Loss terms and learning rate against step, from parsed metrics rows."""
    steps = np.array([r["step"] for r in rows])
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(6, 5), sharex=True,
                                   gridspec_kw={"height_ratios": [3, 1]})
    for col in LOSS_COLUMNS:
        ax.plot(steps, [r[col] for r in rows], label=col, lw=1)
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    ax_lr.plot(steps, [r["lr"] for r in rows], color="k", lw=1)
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    fig.tight_layout()
    return _save(fig, out_path, config_hash)


def plot_ablation(report, out_path, metrics=("pixel_iou", "pixel_f1", "ap_at_50"),
                  config_hash=None) -> Path:
    """Grouped bars of mean metric per arm, with one-sd error bars."""
    arms = report.arms
    x = np.arange(len(arms))
    width = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(1.6 * len(arms) + 2, 4))
    for k, m in enumerate(metrics):
        ax.bar(x + (k - (len(metrics) - 1) / 2) * width, [a.mean(m) for a in arms], width,
               yerr=[a.sd(m) for a in arms], capsize=3, label=m)
    ax.set_xticks(x, [a.name for a in arms])
    ax.set_ylim(0, 1)
    ax.set_ylabel("score")
    ax.set_title(report.mode)
    ax.legend(frameon=False, fontsize="small")
    fig.tight_layout()
    return _save(fig, out_path, config_hash)


def plot_per_class(report, out_path, config_hash=None) -> Path:
    """Per-class IoU and AP bars for one evaluation report."""
    names = list(report.per_class)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.4 * max(len(names), 1) + 2, 4))
    ax.bar(x - 0.2, [report.per_class[n]["iou"] for n in names], 0.4, label="iou")
    ax.bar(x + 0.2, [report.per_class[n].get("ap") or 0.0 for n in names], 0.4, label="ap")
    ax.set_xticks(x, names)
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, out_path, config_hash)
