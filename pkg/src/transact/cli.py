"""Command-line entry point.

Subcommands: calibrate, prune, schedule, analyze, eval, sweep. Every run
emits exactly one manifest next to its primary output. Exit codes: 0 ok,
2 usage, 3 missing file, 4 invalid config, 5 toolkit error, 1 unexpected.
Log level comes from ``TRANSACT_LOG`` (error|info|debug).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, analytics
from .calib import CalibSet, collect_stats, load_stats, read_token_stream, save_stats
from .config import ModelConfig, load_config_json
from .container import MAGIC, load_config, load_model, save_model
from .errors import ConfigError, TransactError
from .evaluate import compare_metrics, perplexity
from .manifest import ManifestWriter
from .pruner import MetricConfig, PruneTarget, build_report, prune_model
from .schedule import plan_schedule, run_schedule

log = logging.getLogger("transact.cli")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_BAD_CONFIG = 4
EXIT_TOOLKIT = 5
EXIT_UNEXPECTED = 1


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _any_config(path: str) -> ModelConfig:
    """Accept either a JSON config or a (possibly config-only) tensor container."""
    p = _require(path)
    with open(p, "rb") as fh:
        head = fh.read(len(MAGIC))
    if head == MAGIC:
        return load_config(p)
    return load_config_json(p)


def _manifest_path(primary_output: Path) -> Path:
    return primary_output.with_name(primary_output.name + ".manifest.json")


def _params_snapshot(args: argparse.Namespace) -> dict:
    skip = {"func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def cmd_calibrate(args) -> int:
    manifest = ManifestWriter("calibrate", _params_snapshot(args))
    model = load_model(_require(args.model))
    corpus = read_token_stream(_require(args.corpus))
    calib = CalibSet.draw(corpus, args.calib_samples, args.calib_seqlen, args.calib_seed)
    stats = collect_stats(model, calib, n_workers=args.threads)
    out = Path(args.out)
    save_stats(stats, model.config, out)
    log.info("calibrated on %d tokens", stats.token_count)
    manifest.add_input(args.model, args.corpus)
    manifest.add_output(out)
    manifest.write(_manifest_path(out))
    return EXIT_OK


def cmd_prune(args) -> int:
    manifest = ManifestWriter("prune", _params_snapshot(args))
    model = load_model(_require(args.model))
    metric_cfg = MetricConfig(
        metric=args.metric, alpha=args.alpha, outlier_mode=args.outlier_mode, random_seed=args.metric_seed
    )
    stats = None
    stats_meta = {}
    if args.metric == "transact":
        if not args.stats:
            raise ConfigError("metric=transact requires --stats")
        stats, stats_cfg = load_stats(_require(args.stats))
        if (stats_cfg.n_layers, stats_cfg.n_heads, stats_cfg.head_dim, stats_cfg.mlp_dim) != (
            model.config.n_layers, model.config.n_heads, model.config.head_dim, model.config.mlp_dim,
        ):
            raise ConfigError("statistics shape does not match the model architecture")
        stats_meta = {"stats_file": str(args.stats), "token_count": stats.token_count}
        manifest.add_input(args.stats)
    target = PruneTarget(n_heads=args.target_heads, mlp_dim=args.target_mlp)
    report = build_report(model, stats, target, metric_cfg)
    pruned = prune_model(model, report)
    out = Path(args.out)
    save_model(pruned, out)

    report_path = Path(args.report)
    payload = report.to_dict()
    payload["stats_provenance"] = stats_meta
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
    log.info("pruned to heads=%d mlp=%d", args.target_heads, args.target_mlp)
    manifest.add_input(args.model)
    manifest.add_output(out, report_path)
    manifest.write(_manifest_path(out))
    return EXIT_OK


def _schedule_config(path: str) -> dict:
    with open(_require(path), "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    required = ("target_heads", "target_mlp", "n_shots", "seeds")
    for key in required:
        if key not in raw:
            raise ConfigError(f"schedule config missing required field {key!r}")
    seeds = raw["seeds"]
    if not isinstance(seeds, dict) or "calib" not in seeds:
        raise ConfigError("schedule config field 'seeds' must be an object with a 'calib' entry")
    return raw


def cmd_schedule(args) -> int:
    manifest = ManifestWriter("schedule", _params_snapshot(args))
    raw = _schedule_config(args.config)
    model = load_model(_require(args.model))
    corpus = read_token_stream(_require(args.corpus))
    target = PruneTarget(n_heads=int(raw["target_heads"]), mlp_dim=int(raw["target_mlp"]))
    sched = plan_schedule(
        model.config,
        target,
        int(raw["n_shots"]),
        raw.get("interpolation", "linear"),
        recovery=raw.get("recovery", "none"),
        recalibrate_each_shot=bool(raw.get("recalibrate", True)),
        ridge_lambda=float(raw.get("lambda", 1e-3)),
    )
    metric_cfg = MetricConfig(
        metric=raw.get("metric", "transact"),
        alpha=float(raw.get("alpha", 1.0)),
        outlier_mode=raw.get("outlier_mode", "channel-norm"),
        random_seed=int(raw["seeds"].get("metric", 0)),
    )
    outdir = Path(args.outdir)
    calib = raw.get("calib", {})
    run_schedule(
        model,
        corpus,
        sched,
        metric_cfg,
        calib_samples=int(calib.get("samples", 128)),
        calib_seqlen=int(calib.get("seqlen", 128)),
        calib_seed=int(raw["seeds"]["calib"]),
        outdir=outdir,
        n_workers=args.threads,
    )
    manifest.add_input(args.config, args.model, args.corpus)
    manifest.add_output(*sorted(outdir.glob("shot_*.model")))
    manifest.add_output(*sorted(outdir.glob("shot_*.report.json")))
    manifest.add_output(outdir / "schedule_log.json")
    manifest.write(outdir / "manifest.json")
    return EXIT_OK


def cmd_analyze(args) -> int:
    manifest = ManifestWriter("analyze", _params_snapshot(args))
    cfg = _any_config(args.config)
    ref_cfg = _any_config(args.ref) if args.ref else None
    ctx = [int(c) for c in args.ctx.split(",") if c]
    if not ctx:
        raise ConfigError("--ctx must list at least one context length")
    reports = [
        analytics.build_cost_report(cfg, args.seq, ctx, ref_cfg, name=Path(args.config).stem)
    ]
    if ref_cfg is not None:
        reports.append(analytics.build_cost_report(ref_cfg, args.seq, ctx, name=Path(args.ref).stem))

    out = Path(args.out)
    rows = [row for report in reports for row in report.rows()]
    if out.suffix == ".csv":
        with open(out, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            json.dump({"rows": rows}, fh, indent=2)
    outputs = [out]
    if not args.no_figures:
        from .plots import render_flops_figure

        fig_path = out.with_name(out.stem + "_flops.png")
        render_flops_figure(reports, fig_path)
        outputs.append(fig_path)
    kv_m = reports[0].kv_values // 10**6
    print(f"params={reports[0].params.total:,}  kv@{args.seq}={reports[0].kv_values:,} values ({kv_m}M)")
    manifest.add_input(args.config, *( [args.ref] if args.ref else [] ))
    manifest.add_output(*outputs)
    manifest.write(_manifest_path(out))
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = ManifestWriter("eval", _params_snapshot(args))
    model = load_model(_require(args.model))
    stream = read_token_stream(_require(args.stream))
    result = perplexity(model, stream, args.window)
    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "perplexity": result.perplexity,
                "token_count": result.token_count,
                "window": args.window,
                "model_hash": result.model_hash,
            },
            fh,
            indent=2,
        )
    print(f"perplexity={result.perplexity:.4f} over {result.token_count} predicted tokens")
    manifest.add_input(args.model, args.stream)
    manifest.add_output(out)
    manifest.write(_manifest_path(out))
    return EXIT_OK


def _sweep_config(path: str) -> dict:
    with open(_require(path), "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if "targets" not in raw or not raw["targets"]:
        raise ConfigError("sweep grid missing required field 'targets'")
    for i, t in enumerate(raw["targets"]):
        if "heads" not in t or "mlp" not in t:
            raise ConfigError(f"sweep grid targets[{i}] must define 'heads' and 'mlp'")
    if "base_seed" not in raw:
        raise ConfigError("sweep grid missing required field 'base_seed'")
    return raw


def cmd_sweep(args) -> int:
    manifest = ManifestWriter("sweep", _params_snapshot(args))
    raw = _sweep_config(args.grid)
    model = load_model(_require(args.model))
    corpus = read_token_stream(_require(args.corpus))
    calib = raw.get("calib", {})
    seeds = [int(raw["base_seed"]) + i for i in range(args.seeds)]
    rows = compare_metrics(
        model,
        corpus,
        targets=[PruneTarget(n_heads=int(t["heads"]), mlp_dim=int(t["mlp"])) for t in raw["targets"]],
        metrics=raw.get("metrics", ["transact", "magnitude", "random"]),
        seeds=seeds,
        alpha=float(raw.get("alpha", 1.0)),
        outlier_mode=raw.get("outlier_mode", "channel-norm"),
        n_shots_axis=[int(s) for s in raw.get("n_shots", [1])],
        calib_samples=int(calib.get("samples", 32)),
        calib_seqlen=int(calib.get("seqlen", 64)),
        window=int(raw.get("window", 128)),
        recovery=raw.get("recovery", "none"),
        ridge_lambda=float(raw.get("ridge_lambda", 1e-3)),
        holdout_tokens=raw.get("holdout_tokens"),
        n_workers=args.threads,
    )
    out = Path(args.out)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    outputs = [out]
    if not args.no_figures:
        from .plots import render_sweep_figure

        fig_path = out.with_name(out.stem + "_ppl.png")
        render_sweep_figure(rows, fig_path)
        outputs.append(fig_path)
    manifest.add_input(args.grid, args.model, args.corpus)
    manifest.add_output(*outputs)
    manifest.write(_manifest_path(out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transact", description=__doc__)
    parser.add_argument("--version", action="version", version=f"transact {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--threads", type=int, default=1, help="worker pool cap for calibration/recovery")

    p = sub.add_parser("calibrate", help="collect activation statistics over calibration samples")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True, help="flat u32-LE token stream")
    p.add_argument("--calib-samples", type=int, default=128)
    p.add_argument("--calib-seqlen", type=int, default=128)
    p.add_argument("--calib-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("prune", help="score, select, and structurally slice a model")
    p.add_argument("--model", required=True)
    p.add_argument("--stats", default=None, help="statistics container (required for metric=transact)")
    p.add_argument("--target-heads", type=int, required=True)
    p.add_argument("--target-mlp", type=int, required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--metric", choices=("transact", "magnitude", "random"), default="transact")
    p.add_argument("--outlier-mode", choices=("channel-norm", "token-peak"), default="channel-norm")
    p.add_argument("--metric-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    common(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("schedule", help="run an iterative multi-shot pruning schedule")
    p.add_argument("--config", required=True, help="schedule JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--outdir", required=True)
    common(p)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("analyze", help="parameter/KV-cache/FLOPs accounting from configs")
    p.add_argument("--config", required=True, help="model config JSON or tensor container")
    p.add_argument("--ref", default=None, help="reference config for reduction percentages")
    p.add_argument("--seq", type=int, default=4096)
    p.add_argument("--ctx", default="256,512,1024,2048,4096")
    p.add_argument("--out", required=True, help=".json or .csv")
    p.add_argument("--no-figures", action="store_true")
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("eval", help="held-out perplexity of a model over a token stream")
    p.add_argument("--model", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--window", type=int, default=1024)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="prune+eval grid over targets/metrics/shots/seeds")
    p.add_argument("--grid", required=True, help="sweep grid JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, base_seed..base_seed+N-1")
    p.add_argument("--out", required=True, help=".csv")
    p.add_argument("--no-figures", action="store_true")
    common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("TRANSACT_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), format="%(name)s: %(message)s")


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc), EXIT_MISSING_FILE)
    except ConfigError as exc:
        return _fail("invalid_config", str(exc), EXIT_BAD_CONFIG)
    except TransactError as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_TOOLKIT)
    except Exception as exc:  # pragma: no cover - defensive
        return _fail("unexpected", f"{type(exc).__name__}: {exc}", EXIT_UNEXPECTED)


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
