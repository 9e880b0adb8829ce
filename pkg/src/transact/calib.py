"""Streaming statistics over transitional activations.

Calibration folds every token's activations into three accumulators per
layer: the per-channel sum of squares inside each attention head, the running
per-channel peak magnitude inside each head, and the per-channel sum of
squares of the MLP transitional state. The channel L2 norm used by salience
is ``sqrt(sumsq)``; no normalization by token count happens here so that
statistics from parallel shards merge by plain sum/max.

Accumulators are float64: sums of squares over many tokens need more
headroom than the float32 activations themselves.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .container import read_container, write_container
from .errors import TransactError
from .model import ModelWeights, forward


@dataclass
class CalibSet:
    samples: np.ndarray  # [n_samples, seq_len] int64
    seq_len: int
    seed: int

    @classmethod
    def draw(cls, corpus: np.ndarray, n_samples: int, seq_len: int, seed: int) -> "CalibSet":
        """Sample exact-length slices from a flat token stream.

        Slices are drawn without replacement over all valid start offsets;
        no padding is ever applied.
        """
        corpus = np.asarray(corpus).ravel()
        if n_samples < 1:
            raise TransactError("calibration needs at least one sample")
        n_starts = corpus.size - seq_len + 1
        if n_starts < n_samples:
            raise TransactError(
                f"corpus of {corpus.size} tokens cannot yield {n_samples} samples of length {seq_len}"
            )
        rng = np.random.default_rng(seed)
        starts = rng.choice(n_starts, size=n_samples, replace=False)
        samples = np.stack([corpus[s : s + seq_len] for s in starts]).astype(np.int64)
        return cls(samples=samples, seq_len=seq_len, seed=seed)


@dataclass
class CalibStats:
    head_sumsq: list[np.ndarray]   # per layer [A_n, A_d] f64
    head_maxnorm: list[np.ndarray]  # per layer [A_n, A_d] f64, exact running max of |act|
    mlp_sumsq: list[np.ndarray]    # per layer [P] f64
    token_count: int

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "CalibStats":
        return cls(
            head_sumsq=[np.zeros((cfg.n_heads, cfg.head_dim)) for _ in range(cfg.n_layers)],
            head_maxnorm=[np.zeros((cfg.n_heads, cfg.head_dim)) for _ in range(cfg.n_layers)],
            mlp_sumsq=[np.zeros(cfg.mlp_dim) for _ in range(cfg.n_layers)],
            token_count=0,
        )

    @property
    def n_layers(self) -> int:
        return len(self.head_sumsq)

    def fold(self, layer: int, act_a: np.ndarray, act_p: np.ndarray) -> None:
        sq = np.square(act_a, dtype=np.float64)
        self.head_sumsq[layer] += sq.sum(axis=0)
        np.maximum(self.head_maxnorm[layer], np.abs(act_a).max(axis=0), out=self.head_maxnorm[layer])
        self.mlp_sumsq[layer] += np.square(act_p, dtype=np.float64).sum(axis=0)

    def sliced(self, keep_heads_per_layer: list[np.ndarray], keep_channels_per_layer: list[np.ndarray]) -> "CalibStats":
        """Restrict the accumulators to surviving heads/channels."""
        return CalibStats(
            head_sumsq=[a[k] for a, k in zip(self.head_sumsq, keep_heads_per_layer)],
            head_maxnorm=[a[k] for a, k in zip(self.head_maxnorm, keep_heads_per_layer)],
            mlp_sumsq=[a[c] for a, c in zip(self.mlp_sumsq, keep_channels_per_layer)],
            token_count=self.token_count,
        )


def merge_stats(a: CalibStats, b: CalibStats) -> CalibStats:
    if a.n_layers != b.n_layers:
        raise TransactError(f"cannot merge stats for {a.n_layers} vs {b.n_layers} layers")
    for l in range(a.n_layers):
        if a.head_sumsq[l].shape != b.head_sumsq[l].shape or a.mlp_sumsq[l].shape != b.mlp_sumsq[l].shape:
            raise TransactError(f"stats shape mismatch at layer {l}")
    return CalibStats(
        head_sumsq=[x + y for x, y in zip(a.head_sumsq, b.head_sumsq)],
        head_maxnorm=[np.maximum(x, y) for x, y in zip(a.head_maxnorm, b.head_maxnorm)],
        mlp_sumsq=[x + y for x, y in zip(a.mlp_sumsq, b.mlp_sumsq)],
        token_count=a.token_count + b.token_count,
    )


def _collect_shard(model: ModelWeights, samples: np.ndarray) -> CalibStats:
    stats = CalibStats.zeros(model.config)
    for row in samples:
        forward(model, row, consumer=stats.fold)
        stats.token_count += int(row.size)
    return stats


def collect_stats(model: ModelWeights, calib: CalibSet, n_workers: int = 1) -> CalibStats:
    """Fold every calibration sample into fresh statistics.

    With ``n_workers > 1`` samples are sharded contiguously, each worker owns
    a private accumulator, and shards merge in shard order -- deterministic
    for a fixed worker count, and within 1e-4 relative of a single pass.
    """
    samples = calib.samples
    if samples.shape[0] == 0:
        raise TransactError("empty calibration set")
    if n_workers <= 1 or samples.shape[0] == 1:
        return _collect_shard(model, samples)
    shards = np.array_split(samples, min(n_workers, samples.shape[0]))
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        parts = list(pool.map(lambda s: _collect_shard(model, s), shards))
    merged = parts[0]
    for part in parts[1:]:
        merged = merge_stats(merged, part)
    return merged


def save_stats(stats: CalibStats, cfg: ModelConfig, path: str | Path) -> None:
    tensors = {}
    for l in range(stats.n_layers):
        tensors[f"stats.{l}.head_sumsq"] = stats.head_sumsq[l]
        tensors[f"stats.{l}.head_maxnorm"] = stats.head_maxnorm[l]
        tensors[f"stats.{l}.mlp_sumsq"] = stats.mlp_sumsq[l]
    write_container(path, "stats", cfg, tensors, meta={"token_count": stats.token_count})


def load_stats(path: str | Path) -> tuple[CalibStats, ModelConfig]:
    box = read_container(path)
    if box.kind != "stats":
        raise TransactError(f"{path}: expected a stats container, got kind={box.kind!r}")
    cfg = box.config
    stats = CalibStats(
        head_sumsq=[box.tensors[f"stats.{l}.head_sumsq"] for l in range(cfg.n_layers)],
        head_maxnorm=[box.tensors[f"stats.{l}.head_maxnorm"] for l in range(cfg.n_layers)],
        mlp_sumsq=[box.tensors[f"stats.{l}.mlp_sumsq"] for l in range(cfg.n_layers)],
        token_count=int(box.meta.get("token_count", 0)),
    )
    return stats, cfg


def read_token_stream(path: str | Path) -> np.ndarray:
    """Flat binary stream of 32-bit little-endian token IDs."""
    return np.fromfile(path, dtype="<u4").astype(np.int64)


def write_token_stream(tokens: np.ndarray, path: str | Path) -> None:
    np.asarray(tokens).astype("<u4").tofile(path)
