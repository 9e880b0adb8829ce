"""Multi-shot pruning plans and their execution.

A schedule interpolates the head count and MLP width from the source shape
down to the target over ``n_shots`` steps: head counts are floored to whole
heads (so every intermediate attention width is a multiple of the head
width), intermediate MLP widths are floored to a multiple of 64 for
alignment, and the final shot lands exactly on the target. Between shots the
runner optionally re-collects calibration statistics on the evolving model
and applies least-squares output reconstruction to the contracting
projections in place of full fine-tuning.

Per-shot ratios are parameter based: ``r_i`` is the fraction of the source
model's parameters removed by shot ``i``, so the ratios telescope to the
total reduction by construction.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import analytics
from .calib import CalibSet, CalibStats, merge_stats
from .config import ModelConfig
from .container import save_model
from .errors import ScheduleError
from .model import ModelWeights, forward
from .pruner import MetricConfig, PruneTarget, SalienceReport, build_report, prune_model
from .recovery import RecoveryInfo, recover_from_gram, trace_scaled_lambda

log = logging.getLogger("transact.schedule")

INTERPOLATIONS = ("linear", "geometric")
RECOVERIES = ("none", "least_squares")
_MLP_STEP = 64  # intermediate MLP widths snap down to this multiple


@dataclass
class PruneSchedule:
    shots: list[PruneTarget]
    ratios: list[float]
    total_ratio: float
    recovery: str = "none"
    recalibrate_each_shot: bool = True
    ridge_lambda: float = 1e-3  # relative; scaled by the mean Gram diagonal per layer

    def validate(self, source: ModelConfig) -> "PruneSchedule":
        if not self.shots:
            raise ScheduleError("schedule has no shots")
        if self.recovery not in RECOVERIES:
            raise ScheduleError(f"recovery must be one of {RECOVERIES}, got {self.recovery!r}")
        if self.ridge_lambda < 0:
            raise ScheduleError(f"ridge_lambda must be non-negative, got {self.ridge_lambda}")
        prev = PruneTarget(source.n_heads, source.mlp_dim)
        for i, shot in enumerate(self.shots):
            shot.validate(source)
            if shot.n_heads > prev.n_heads or shot.mlp_dim > prev.mlp_dim:
                raise ScheduleError(f"shot {i} grows the model: {prev} -> {shot}")
            prev = shot
        return self


@dataclass
class RecoveryResult:
    layer: int
    projection: str  # "attn" or "mlp"
    mse_before: float
    mse_after: float
    lam: float
    cond: float

    @classmethod
    def from_info(cls, layer: int, projection: str, info: RecoveryInfo) -> "RecoveryResult":
        return cls(layer, projection, info.mse_before, info.mse_after, info.lam, info.cond)


@dataclass
class ShotOutcome:
    index: int
    target: PruneTarget
    recoveries: list[RecoveryResult] = field(default_factory=list)


def _interp_dims(source: int, target: int, n_shots: int, mode: str) -> list[float]:
    if mode == "linear":
        return [source + (target - source) * (i / n_shots) for i in range(1, n_shots + 1)]
    return [source * (target / source) ** (i / n_shots) for i in range(1, n_shots + 1)]


def plan_schedule(
    source: ModelConfig,
    target: PruneTarget,
    n_shots: int,
    interpolation: str = "linear",
    *,
    recovery: str = "none",
    recalibrate_each_shot: bool = True,
    ridge_lambda: float = 1e-3,
) -> PruneSchedule:
    """Interpolate per-shot targets from the source shape down to ``target``."""
    source.validate()
    target.validate(source)
    if not isinstance(n_shots, int) or n_shots < 1:
        raise ScheduleError(f"n_shots must be a positive integer, got {n_shots!r}")
    if interpolation not in INTERPOLATIONS:
        raise ScheduleError(f"interpolation must be one of {INTERPOLATIONS}, got {interpolation!r}")

    heads = _interp_dims(source.n_heads, target.n_heads, n_shots, interpolation)
    mlps = _interp_dims(source.mlp_dim, target.mlp_dim, n_shots, interpolation)
    shots: list[PruneTarget] = []
    prev_h, prev_p = source.n_heads, source.mlp_dim
    for i in range(n_shots):
        if i == n_shots - 1:
            h, p = target.n_heads, target.mlp_dim
        else:
            h = min(prev_h, max(target.n_heads, int(np.floor(heads[i]))))
            p = int(np.floor(mlps[i])) // _MLP_STEP * _MLP_STEP
            p = min(prev_p, max(target.mlp_dim, p))
        shots.append(PruneTarget(n_heads=h, mlp_dim=p))
        prev_h, prev_p = h, p

    source_params = analytics.count_params(source).total
    ratios = []
    prev_params = source_params
    for shot in shots:
        params = analytics.count_params(source.with_dims(n_heads=shot.n_heads, mlp_dim=shot.mlp_dim)).total
        ratios.append((prev_params - params) / source_params)
        prev_params = params
    total_ratio = (source_params - prev_params) / source_params

    return PruneSchedule(
        shots=shots,
        ratios=ratios,
        total_ratio=total_ratio,
        recovery=recovery,
        recalibrate_each_shot=recalibrate_each_shot,
        ridge_lambda=ridge_lambda,
    ).validate(source)


class _ShotCollector:
    """One calibration pass: statistics plus (optionally) per-layer Gram matrices."""

    def __init__(self, cfg: ModelConfig, want_grams: bool):
        self.stats = CalibStats.zeros(cfg)
        self.want_grams = want_grams
        a, p = cfg.attn_dim, cfg.mlp_dim
        self.gram_a = [np.zeros((a, a)) for _ in range(cfg.n_layers)] if want_grams else None
        self.gram_p = [np.zeros((p, p)) for _ in range(cfg.n_layers)] if want_grams else None

    def consume(self, layer: int, act_a: np.ndarray, act_p: np.ndarray) -> None:
        self.stats.fold(layer, act_a, act_p)
        if self.want_grams:
            flat = act_a.reshape(act_a.shape[0], -1).astype(np.float64)
            self.gram_a[layer] += flat.T @ flat
            pp = act_p.astype(np.float64)
            self.gram_p[layer] += pp.T @ pp

    def run(self, model: ModelWeights, samples: np.ndarray) -> "_ShotCollector":
        for row in samples:
            forward(model, row, consumer=self.consume)
            self.stats.token_count += int(row.size)
        return self


def _collect_shot(model: ModelWeights, samples: np.ndarray, want_grams: bool, n_workers: int) -> _ShotCollector:
    if n_workers <= 1 or samples.shape[0] == 1:
        return _ShotCollector(model.config, want_grams).run(model, samples)
    shards = np.array_split(samples, min(n_workers, samples.shape[0]))
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        parts = list(pool.map(lambda s: _ShotCollector(model.config, want_grams).run(model, s), shards))
    head = parts[0]
    for part in parts[1:]:
        head.stats = merge_stats(head.stats, part.stats)
        if want_grams:
            for l in range(len(head.gram_a)):
                head.gram_a[l] += part.gram_a[l]
                head.gram_p[l] += part.gram_p[l]
    return head


def _apply_recovery(
    pruned: ModelWeights,
    report: SalienceReport,
    collector: _ShotCollector,
    source_layers,
    ridge_rel: float,
    n_tokens: int,
    n_workers: int,
) -> list[RecoveryResult]:
    from .pruner import head_columns

    def solve(layer: int) -> list[RecoveryResult]:
        ls = report.layers[layer]
        cols = head_columns(np.asarray(ls.keep_heads), pruned.config.head_dim)
        out = []
        for projection, gram, w_full, keep in (
            ("attn", collector.gram_a[layer], source_layers[layer].wo, cols),
            ("mlp", collector.gram_p[layer], source_layers[layer].wd, np.asarray(ls.keep_channels)),
        ):
            lam = trace_scaled_lambda(gram[np.ix_(keep, keep)], ridge_rel)
            w_new, info = recover_from_gram(gram, w_full, keep, lam, n_tokens)
            if projection == "attn":
                pruned.layers[layer].wo = w_new
            else:
                pruned.layers[layer].wd = w_new
            out.append(RecoveryResult.from_info(layer, projection, info))
        return out

    n_layers = pruned.config.n_layers
    if n_workers <= 1 or n_layers <= 1:
        nested = [solve(l) for l in range(n_layers)]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            nested = list(pool.map(solve, range(n_layers)))
    return [r for group in nested for r in group]


def run_schedule(
    model: ModelWeights,
    corpus: np.ndarray,
    schedule: PruneSchedule,
    metric_cfg: MetricConfig,
    *,
    calib_samples: int = 128,
    calib_seqlen: int = 128,
    calib_seed: int = 0,
    outdir: str | Path | None = None,
    n_workers: int = 1,
) -> tuple[ModelWeights, list[ShotOutcome]]:
    """Execute every shot: calibrate, score, slice, recover.

    Emits ``shot_{i}.model`` and ``shot_{i}.report.json`` plus a run log when
    ``outdir`` is given. Deterministic given the seeds; a failing shot raises
    with the shot index and leaves earlier checkpoints on disk.
    """
    schedule.validate(model.config)
    metric_cfg.validate()
    outdir = Path(outdir) if outdir is not None else None
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)

    want_grams = schedule.recovery == "least_squares"
    need_stats = metric_cfg.metric == "transact"
    need_collect = need_stats or want_grams  # magnitude/random without recovery skip calibration
    outcomes: list[ShotOutcome] = []
    carried: _ShotCollector | None = None

    for i, target in enumerate(schedule.shots):
        try:
            collector = None
            if need_collect:
                if i == 0 or schedule.recalibrate_each_shot:
                    calib = CalibSet.draw(corpus, calib_samples, calib_seqlen, seed=calib_seed + i)
                    collector = _collect_shot(model, calib.samples, want_grams, n_workers)
                else:
                    collector = carried
            stats = collector.stats if need_stats else None
            report = build_report(model, stats, target, metric_cfg)
            source_layers = model.layers
            pruned = prune_model(model, report)
            recoveries: list[RecoveryResult] = []
            if want_grams:
                recoveries = _apply_recovery(
                    pruned, report, collector, source_layers,
                    schedule.ridge_lambda, collector.stats.token_count, n_workers,
                )
            if need_collect and not schedule.recalibrate_each_shot:
                carried = _slice_collector(collector, report, model.config.head_dim)
            model = pruned
        except Exception as exc:
            raise ScheduleError(f"shot {i} failed: {exc}") from exc

        outcome = ShotOutcome(index=i, target=target, recoveries=recoveries)
        outcomes.append(outcome)
        log.info("shot %d -> heads=%d mlp=%d", i, target.n_heads, target.mlp_dim)
        if outdir is not None:
            save_model(model, outdir / f"shot_{i}.model")
            with open(outdir / f"shot_{i}.report.json", "w", encoding="utf-8") as fh:
                json.dump(report.to_dict(), fh, indent=2)

    if outdir is not None:
        log_payload = {
            "shots": [
                {
                    "index": o.index,
                    "target": asdict(o.target),
                    "ratio": schedule.ratios[o.index],
                    "recoveries": [asdict(r) for r in o.recoveries],
                }
                for o in outcomes
            ],
            "total_ratio": schedule.total_ratio,
            "recovery": schedule.recovery,
            "recalibrate_each_shot": schedule.recalibrate_each_shot,
        }
        with open(outdir / "schedule_log.json", "w", encoding="utf-8") as fh:
            json.dump(log_payload, fh, indent=2)
    return model, outcomes


def _slice_collector(collector: _ShotCollector, report: SalienceReport, head_dim: int) -> _ShotCollector:
    """Restrict carried statistics/Grams to the structures that survived."""
    from .pruner import head_columns

    keep_heads = [np.asarray(ls.keep_heads) for ls in report.layers]
    keep_channels = [np.asarray(ls.keep_channels) for ls in report.layers]
    out = object.__new__(_ShotCollector)
    out.stats = collector.stats.sliced(keep_heads, keep_channels)
    out.want_grams = collector.want_grams
    if collector.want_grams:
        cols = [head_columns(kh, head_dim) for kh in keep_heads]
        out.gram_a = [g[np.ix_(c, c)] for g, c in zip(collector.gram_a, cols)]
        out.gram_p = [g[np.ix_(kc, kc)] for g, kc in zip(collector.gram_p, keep_channels)]
    else:
        out.gram_a = None
        out.gram_p = None
    return out
