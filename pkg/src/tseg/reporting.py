"""Report figures rendered to PNG files alongside the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps PNG bytes reproducible across identical runs
_PNG_META = {"Software": "tseg"}


def save_loss_curve(path, step_losses, epoch_losses) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(step_losses) + 1), step_losses, lw=0.8, label="batch loss")
    if len(epoch_losses) > 1:
        xs = [round((i + 1) * len(step_losses) / len(epoch_losses)) for i in range(len(epoch_losses))]
        ax.plot(xs, epoch_losses, "o-", ms=3, label="epoch mean")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def save_seg_eval_figure(path, report) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    names = ["MAE", "WD", "P", "R", "F1"]
    values = [report.mae, report.window_diff, report.precision, report.recall, report.f1]
    ax1.bar(names, values, color="#4878a8")
    ax1.set_title("segmentation metrics")
    for name, value in zip(names, values):
        ax1.text(name, value, f"{value:.3f}", ha="center", va="bottom", fontsize=8)
    wds = [row["window_diff"] for row in report.per_dialogue]
    ax2.hist(wds, bins=20, range=(0.0, 1.0), color="#a85448")
    ax2.set_xlabel("per-dialogue WindowDiff")
    ax2.set_ylabel("dialogues")
    ax2.set_title(f"WindowDiff distribution (k={report.wd_window})")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def save_retrieval_metrics_figure(path, metrics: dict[str, float]) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(metrics)
    values = [metrics[k] for k in names]
    ax.bar(names, values, color="#5a9367")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("retrieval metrics")
    for name, value in zip(names, values):
        ax.text(name, value, f"{value:.3f}", ha="center", va="bottom", fontsize=8)
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
