"""Report figures rendered to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MODEL_COLORS = {"M^a": "#4c72b0", "M^b": "#dd8452", "baseline": "#8c8c8c"}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_traces(report: dict, path: Path) -> Path | None:
    traces = {name: (report.get(name) or {}).get("loss_trace") for name in ("pretrain", "continual")}
    traces = {k: v for k, v in traces.items() if v}
    if not traces:
        return None
    fig, axes = plt.subplots(1, len(traces), figsize=(4.5 * len(traces), 3.2), squeeze=False)
    for ax, (name, trace) in zip(axes[0], traces.items()):
        ax.plot(np.arange(1, len(trace) + 1), trace, marker="o", ms=3)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        ax.set_title(name)
        ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_metrics(report: dict, path: Path) -> Path | None:
    evals = report.get("evals")
    if not evals:
        return None
    models = [m for m in MODEL_COLORS if any(e["model"] == m for e in evals)]
    lookup = {(e["model"], e["split"]): e["value"] for e in evals}
    fig, ax = plt.subplots(figsize=(5, 3.2))
    width = 0.8 / len(models)
    x = np.arange(2)
    for i, m in enumerate(models):
        vals = [lookup.get((m, s), np.nan) for s in ("in", "ood")]
        ax.bar(x + (i - (len(models) - 1) / 2) * width, vals, width, label=m, color=MODEL_COLORS[m])
    ax.set_xticks(x, ["in-distribution holdout", "OOD"])
    ax.set_ylabel(evals[0]["metric"])
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_scores(scores: np.ndarray, threshold: float, detector: str, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(scores, bins=40, color="#4c72b0", alpha=0.8)
    ax.axvline(threshold, color="k", ls="--", lw=1)
    ax.set_xlabel("unknown probability" if detector == "openmax" else "calibrated confidence")
    ax.set_ylabel("rows")
    ax.set_title(f"{detector} scores")
    return _save(fig, path)


def render_all(report: dict, fig_dir: Path, scores_path: Path | None = None) -> list[Path]:
    fig_dir = Path(fig_dir)
    made = [plot_loss_traces(report, fig_dir / "loss_traces.png"),
            plot_metrics(report, fig_dir / "metrics.png")]
    sp = report.get("split")
    if sp and scores_path is not None and Path(scores_path).is_file():
        made.append(plot_scores(np.load(scores_path), sp["threshold"], sp["detector"],
                                fig_dir / "split_scores.png"))
    return [p for p in made if p is not None]
