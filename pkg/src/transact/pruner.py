"""Salience scoring and structural slicing.

Head salience combines the mean of per-channel L2 norms of the head's
transitional activations with an ``alpha``-weighted outlier term; MLP channel
salience is the channel's L2 norm directly. Selection is plain top-K with
lowest-index tie-breaking, and kept indices preserve their original relative
order so the sliced matrices never introduce a permutation.

Pruning slices output columns of the expanding projections (query/key/value
and gate/up) and the matching input rows of the contracting projections
(attention output and MLP down). Head slices are contiguous ``head_dim``-wide
column blocks, aligned across q/k/v. The residual width H, embeddings, norm
vectors, and LM head are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .calib import CalibStats
from .config import ModelConfig
from .errors import PruneError
from .model import LayerWeights, ModelWeights

METRICS = ("transact", "magnitude", "random")
OUTLIER_MODES = ("channel-norm", "token-peak")


@dataclass(frozen=True)
class MetricConfig:
    metric: str = "transact"
    alpha: float = 1.0
    outlier_mode: str = "channel-norm"
    random_seed: int = 0

    def validate(self) -> "MetricConfig":
        if self.metric not in METRICS:
            raise PruneError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.outlier_mode not in OUTLIER_MODES:
            raise PruneError(f"outlier_mode must be one of {OUTLIER_MODES}, got {self.outlier_mode!r}")
        if not (self.alpha >= 0):
            raise PruneError(f"alpha must be non-negative, got {self.alpha!r}")
        return self


@dataclass(frozen=True)
class PruneTarget:
    n_heads: int
    mlp_dim: int

    def validate(self, cfg: ModelConfig) -> "PruneTarget":
        if not (1 <= self.n_heads <= cfg.n_heads):
            raise PruneError(f"target n_heads={self.n_heads} outside [1, {cfg.n_heads}]")
        if not (1 <= self.mlp_dim <= cfg.mlp_dim):
            raise PruneError(f"target mlp_dim={self.mlp_dim} outside [1, {cfg.mlp_dim}]")
        return self


@dataclass
class LayerSalience:
    head_scores: np.ndarray
    mlp_scores: np.ndarray
    keep_heads: np.ndarray
    keep_channels: np.ndarray


@dataclass
class SalienceReport:
    layers: list[LayerSalience]
    metric: MetricConfig
    target: PruneTarget
    token_count: int

    def to_dict(self) -> dict:
        return {
            "metric": asdict(self.metric),
            "target": asdict(self.target),
            "token_count": self.token_count,
            "layers": [
                {
                    "head_scores": ls.head_scores.tolist(),
                    "mlp_scores": ls.mlp_scores.tolist(),
                    "keep_heads": ls.keep_heads.tolist(),
                    "keep_channels": ls.keep_channels.tolist(),
                }
                for ls in self.layers
            ],
        }


def head_salience(stats: CalibStats, layer: int, cfg: MetricConfig) -> np.ndarray:
    """Per-head score: mean of channel L2 norms plus alpha * outlier term."""
    cfg.validate()
    if stats.token_count <= 0:
        raise PruneError("statistics hold no tokens; run calibration first")
    norms = np.sqrt(stats.head_sumsq[layer])
    if cfg.outlier_mode == "channel-norm":
        outlier = norms.max(axis=1)
    else:
        outlier = stats.head_maxnorm[layer].max(axis=1)
    return norms.mean(axis=1) + cfg.alpha * outlier


def mlp_salience(stats: CalibStats, layer: int) -> np.ndarray:
    """Per-channel score: the channel's activation L2 norm."""
    if stats.token_count <= 0:
        raise PruneError("statistics hold no tokens; run calibration first")
    return np.sqrt(stats.mlp_sumsq[layer])


def select_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties to the lower index, sorted ascending."""
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise PruneError("scores must be 1-D")
    if np.isnan(scores).any():
        raise PruneError("scores contain NaN")
    if not (1 <= k <= scores.size):
        raise PruneError(f"k={k} outside [1, {scores.size}]")
    order = np.argsort(-scores, kind="stable")  # stable: equal scores keep index order
    return np.sort(order[:k])


def baseline_salience(model: ModelWeights, layer: int, cfg: MetricConfig) -> tuple[np.ndarray, np.ndarray]:
    """Comparator scores that need no calibration: (head_scores, channel_scores).

    ``magnitude``: mean |w| over each head's q/k/v/o slices and each channel's
    gate/up/down slices. ``random``: uniform scores seeded per (seed, layer);
    heads are drawn before channels.
    """
    cfg.validate()
    lw = model.layers[layer]
    a_d = model.config.head_dim
    if cfg.metric == "magnitude":
        qkv = np.abs(np.stack([lw.wq, lw.wk, lw.wv]))  # [3, H, A]
        h = model.config.hidden_dim
        n = model.config.n_heads
        # mean over all elements of the head's four slices: 3 column blocks of
        # wq/wk/wv [H, A_d] plus the matching wo row block [A_d, H].
        sums = qkv.reshape(3, h, n, a_d).sum(axis=(0, 1, 3)) + np.abs(
            lw.wo.reshape(n, a_d, h)
        ).sum(axis=(1, 2))
        head_scores = sums / (4 * h * a_d)
        stacks = [np.abs(lw.wu), np.abs(lw.wd.T)]
        if lw.wg is not None:
            stacks.append(np.abs(lw.wg))
        channel_scores = np.stack(stacks).mean(axis=(0, 1))
        return head_scores, channel_scores
    if cfg.metric == "random":
        rng = np.random.default_rng([cfg.random_seed, layer])
        return rng.random(model.config.n_heads), rng.random(model.config.mlp_dim)
    raise PruneError("transact metric requires calibration statistics; use build_report")


def build_report(
    model: ModelWeights,
    stats: CalibStats | None,
    target: PruneTarget,
    metric_cfg: MetricConfig,
) -> SalienceReport:
    """Score every layer and select uniform per-layer keep-sets."""
    cfg = model.config
    metric_cfg.validate()
    target.validate(cfg)
    if metric_cfg.metric == "transact" and stats is None:
        raise PruneError("transact metric requires calibration statistics")
    layers = []
    for l in range(cfg.n_layers):
        if metric_cfg.metric == "transact":
            hs = head_salience(stats, l, metric_cfg)
            cs = mlp_salience(stats, l)
        else:
            hs, cs = baseline_salience(model, l, metric_cfg)
        layers.append(
            LayerSalience(
                head_scores=hs,
                mlp_scores=cs,
                keep_heads=select_topk(hs, target.n_heads),
                keep_channels=select_topk(cs, target.mlp_dim),
            )
        )
    token_count = stats.token_count if (stats is not None and metric_cfg.metric == "transact") else 0
    return SalienceReport(layers=layers, metric=metric_cfg, target=target, token_count=token_count)


def _check_keep(name: str, keep: np.ndarray, bound: int, expected: int, layer: int) -> np.ndarray:
    keep = np.asarray(keep)
    if keep.size != expected:
        raise PruneError(f"layer {layer}: {name} keep-set has {keep.size} entries, expected {expected}")
    if keep.size == 0 or keep.min() < 0 or keep.max() >= bound:
        raise PruneError(f"layer {layer}: {name} keep-set exceeds current dimension {bound}")
    if np.any(np.diff(keep) <= 0):
        raise PruneError(f"layer {layer}: {name} keep-set must be strictly ascending")
    return keep.astype(np.int64)


def head_columns(keep_heads: np.ndarray, head_dim: int) -> np.ndarray:
    """Flat column indices of the kept heads' contiguous blocks."""
    return (keep_heads[:, None] * head_dim + np.arange(head_dim)[None, :]).ravel()


def prune_model(model: ModelWeights, report: SalienceReport) -> ModelWeights:
    """Slice every layer down to the report's keep-sets; the source is never mutated.

    The result is a dense standard model: updated n_heads/mlp_dim, untouched
    residual width, embeddings, norms, and LM head.
    """
    cfg = model.config
    if len(report.layers) != cfg.n_layers:
        raise PruneError(f"report covers {len(report.layers)} layers, model has {cfg.n_layers}")
    target = report.target.validate(cfg)
    a_d = cfg.head_dim
    new_layers = []
    for l, (lw, ls) in enumerate(zip(model.layers, report.layers)):
        keep_h = _check_keep("head", ls.keep_heads, cfg.n_heads, target.n_heads, l)
        keep_c = _check_keep("channel", ls.keep_channels, cfg.mlp_dim, target.mlp_dim, l)
        cols = head_columns(keep_h, a_d)
        new_layers.append(
            LayerWeights(
                wq=lw.wq[:, cols].copy(),
                wk=lw.wk[:, cols].copy(),
                wv=lw.wv[:, cols].copy(),
                wo=lw.wo[cols, :].copy(),
                attn_norm=lw.attn_norm.copy(),
                wg=None if lw.wg is None else lw.wg[:, keep_c].copy(),
                wu=lw.wu[:, keep_c].copy(),
                wd=lw.wd[keep_c, :].copy(),
                mlp_norm=lw.mlp_norm.copy(),
            )
        )
    pruned = ModelWeights(
        config=cfg.with_dims(n_heads=target.n_heads, mlp_dim=target.mlp_dim),
        layers=new_layers,
        embed=model.embed.copy(),
        final_norm=model.final_norm.copy(),
        lm_head=model.lm_head.copy(),
    )
    return pruned.validate()
