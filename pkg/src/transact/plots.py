"""Figure rendering for the report paths.

The analyze and sweep commands write their delimited output and, next to it,
a PNG rendering of the same numbers: FLOPs-vs-context curves per config and
held-out perplexity by pruning target/metric respectively.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def render_flops_figure(reports, path: str | Path) -> Path:
    """One line per config: prefill FLOPs against context length."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for report in reports:
        ctx = [est.ctx_len for est in report.flops]
        vals = [est.prefill / 1e9 for est in report.flops]
        ax.plot(ctx, vals, marker="o", label=report.name)
    ax.set_xlabel("context length (tokens)")
    ax.set_ylabel("prefill GFLOPs")
    ax.set_xscale("log", base=2)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_sweep_figure(rows: list[dict], path: str | Path) -> Path:
    """Mean perplexity per (target, shots) group, one line per metric."""
    path = Path(path)
    grouped: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for row in rows:
        label = f"{row['target_heads']}h-{row['target_mlp']}p"
        if len({r["n_shots"] for r in rows}) > 1:
            label += f"-{row['n_shots']}s"
        grouped[row["metric"]][label].append(float(row["perplexity"]))

    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    labels = sorted({lbl for per_metric in grouped.values() for lbl in per_metric})
    xs = range(len(labels))
    for metric, per_label in sorted(grouped.items()):
        means = [
            sum(per_label[lbl]) / len(per_label[lbl]) if per_label.get(lbl) else float("nan")
            for lbl in labels
        ]
        ax.plot(xs, means, marker="o", label=metric)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("held-out perplexity (mean over seeds)")
    ax.set_xlabel("pruning target")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
