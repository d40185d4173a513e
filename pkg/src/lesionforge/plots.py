"""Report figures rendered next to the delimited output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def score_bars(subject_rows: list[dict], out_path, title: str = "") -> Path:
    """Grouped per-subject Dice / F1 bars with mean lines."""
    out_path = Path(out_path)
    ids = [r["id"] for r in subject_rows]
    dice = [r["dice"] for r in subject_rows]
    f1 = [r["f1"] for r in subject_rows]
    x = range(len(ids))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(ids) + 2.0), 3.2))
    width = 0.38
    ax.bar([i - width / 2 for i in x], dice, width, label="Dice")
    ax.bar([i + width / 2 for i in x], f1, width, label="F1")
    if dice:
        ax.axhline(sum(dice) / len(dice), color="C0", ls="--", lw=0.8)
        ax.axhline(sum(f1) / len(f1), color="C1", ls="--", lw=0.8)
    ax.set_xticks(list(x))
    ax.set_xticklabels(ids, rotation=45, ha="right", fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def volume_trajectories(trajectories, out_path,
                        rho_values: dict | None = None) -> Path:
    """Predicted vs ground-truth lesion volumes over time, one panel per
    subject, correlation in the legend when available."""
    out_path = Path(out_path)
    n = len(trajectories)
    fig, axes = plt.subplots(1, max(n, 1), figsize=(3.2 * max(n, 1), 3.0),
                             squeeze=False)
    for ax, traj in zip(axes[0], trajectories):
        t = range(1, len(traj.ground_truth_mm3) + 1)
        ax.plot(t, traj.ground_truth_mm3, "k-o", ms=3, label="ground truth")
        label = "predicted"
        if rho_values and traj.subject_id in rho_values:
            label += f" (rho={rho_values[traj.subject_id]:.3f})"
        ax.plot(t, traj.predicted_mm3, "C0-s", ms=3, label=label)
        ax.set_title(traj.subject_id, fontsize=8)
        ax.set_xlabel("timepoint")
        ax.set_ylabel("lesion volume (mm$^3$)")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def training_history(history: list[dict], out_path) -> Path:
    """Loss components per epoch; the constraint switch shows as a step."""
    out_path = Path(out_path)
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for key in ("total", "dice", "longitudinal", "volumetric", "spatial"):
        ax.plot(epochs, [h[key] for h in history], label=key, lw=1.0)
    switched = [h["epoch"] for h in history if h["active_constraints"]]
    if switched and switched[0] > 0:
        ax.axvline(switched[0], color="gray", ls=":", lw=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
