"""Held-out quality measurement for pruned models.

Perplexity is exp(mean next-token NLL) over *non-overlapping* windows of a
flat token stream: each window is forwarded once and every position with a
successor inside the window is predicted. The windowing rule is fixed so
results are deterministic; there is no sliding-window stride.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calib import CalibStats
from .container import model_fingerprint
from .errors import EvalError
from .model import ModelWeights, forward
from .pruner import MetricConfig, PruneTarget
from .schedule import plan_schedule, run_schedule


@dataclass
class EvalResult:
    perplexity: float
    token_count: int
    model_hash: str
    nll: np.ndarray | None = None  # per predicted position, in stream order


def perplexity(
    model: ModelWeights,
    token_stream: np.ndarray,
    window: int,
    keep_nll: bool = False,
) -> EvalResult:
    stream = np.asarray(token_stream).ravel()
    if stream.size < 2:
        raise EvalError("token stream must hold at least two tokens")
    if window < 2:
        raise EvalError(f"window must be at least 2, got {window}")
    if window > model.config.max_seq_len:
        raise EvalError(f"window {window} exceeds max_seq_len {model.config.max_seq_len}")

    total_nll = 0.0
    count = 0
    pieces: list[np.ndarray] = []
    for start in range(0, stream.size, window):
        chunk = stream[start : start + window]
        if chunk.size < 2:
            break  # trailing single token predicts nothing
        logits = forward(model, chunk).logits.astype(np.float64)
        if not np.isfinite(logits).all():
            raise EvalError("non-finite logits during evaluation")
        shifted = logits[:-1]
        targets = chunk[1:]
        logz = np.log(np.sum(np.exp(shifted - shifted.max(axis=1, keepdims=True)), axis=1))
        logz += shifted.max(axis=1)
        nll = logz - shifted[np.arange(targets.size), targets]
        total_nll += float(nll.sum())
        count += int(targets.size)
        if keep_nll:
            pieces.append(nll)

    return EvalResult(
        perplexity=float(np.exp(total_nll / count)),
        token_count=count,
        model_hash=model_fingerprint(model),
        nll=np.concatenate(pieces) if keep_nll else None,
    )


def pruned_mass(
    stats: CalibStats,
    removed_heads: list[np.ndarray],
    removed_channels: list[np.ndarray],
) -> float:
    """Calibration-set reconstruction error proxy: the removed activation energy.

    Summed per removed structure, so it is monotone under supersets by
    construction (joint output error can cancel between structures; this
    per-structure sum cannot).
    """
    total = 0.0
    for l in range(stats.n_layers):
        rh = np.asarray(removed_heads[l], dtype=np.int64)
        rc = np.asarray(removed_channels[l], dtype=np.int64)
        if rh.size:
            total += float(stats.head_sumsq[l][rh].sum())
        if rc.size:
            total += float(stats.mlp_sumsq[l][rc].sum())
    return total


def compare_metrics(
    model: ModelWeights,
    corpus: np.ndarray,
    targets: list[PruneTarget],
    metrics: list[str],
    seeds: list[int],
    *,
    alpha: float = 1.0,
    outlier_mode: str = "channel-norm",
    n_shots_axis: list[int] = (1,),
    calib_samples: int = 32,
    calib_seqlen: int = 64,
    window: int = 128,
    recovery: str = "none",
    ridge_lambda: float = 1e-3,
    holdout_tokens: int | None = None,
    n_workers: int = 1,
) -> list[dict]:
    """Identical prune pipelines differing only in metric/seed/target/shots.

    The first 80% of the corpus feeds calibration sampling; perplexity is
    measured on the remaining tail (optionally capped at ``holdout_tokens``).
    Returns one flat row per combination, CSV-ready.
    """
    corpus = np.asarray(corpus).ravel()
    split = int(corpus.size * 0.8)
    calib_part = corpus[:split]
    holdout = corpus[split:]
    if holdout_tokens is not None:
        holdout = holdout[:holdout_tokens]
    if holdout.size < 2:
        raise EvalError("corpus tail too short for held-out evaluation")

    rows = []
    for target in targets:
        for n_shots in n_shots_axis:
            for metric in metrics:
                for seed in seeds:
                    metric_cfg = MetricConfig(
                        metric=metric, alpha=alpha, outlier_mode=outlier_mode, random_seed=seed
                    )
                    sched = plan_schedule(
                        model.config, target, n_shots,
                        recovery=recovery, ridge_lambda=ridge_lambda,
                    )
                    pruned, _ = run_schedule(
                        model, calib_part, sched, metric_cfg,
                        calib_samples=calib_samples, calib_seqlen=calib_seqlen,
                        calib_seed=seed, n_workers=n_workers,
                    )
                    result = perplexity(pruned, holdout, window)
                    rows.append(
                        {
                            "target_heads": target.n_heads,
                            "target_mlp": target.mlp_dim,
                            "n_shots": n_shots,
                            "metric": metric,
                            "seed": seed,
                            "calib_samples": calib_samples,
                            "perplexity": result.perplexity,
                            "eval_tokens": result.token_count,
                            "model_hash": result.model_hash,
                        }
                    )
    return rows
