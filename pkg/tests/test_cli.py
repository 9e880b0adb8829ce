import json
import time

import numpy as np
import pytest

from transact.cli import main
from transact.calib import write_token_stream
from transact.config import save_config_json
from transact.container import load_model, save_model
from transact.toy import TOY_CONFIG, init_random_model, markov_corpus

LLAMA_CFG = dict(
    n_layers=32, hidden_dim=4096, n_heads=32, head_dim=128,
    mlp_dim=11008, vocab_size=32000, max_seq_len=4096,
)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    model = init_random_model(TOY_CONFIG, seed=100)
    save_model(model, root / "tiny.model")
    corpus = markov_corpus(TOY_CONFIG.vocab_size, 30_000, seed=101)
    write_token_stream(corpus[:24_000], root / "train.tokens")
    write_token_stream(corpus[24_000:], root / "heldout.tokens")
    from transact.config import ModelConfig

    save_config_json(ModelConfig(**LLAMA_CFG), root / "llama7b.json")
    save_config_json(ModelConfig(**(LLAMA_CFG | {"n_heads": 6, "mlp_dim": 1536})), root / "small.json")
    return root


def test_no_arguments_prints_usage_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_analyze_reports_table_kv(workdir, capsys):
    out = workdir / "report.json"
    rc = main([
        "analyze", "--config", str(workdir / "llama7b.json"), "--seq", "4096",
        "--ctx", "256,4096", "--out", str(out), "--no-figures",
    ])
    assert rc == 0
    assert "1073M" in capsys.readouterr().out
    rows = json.loads(out.read_text())["rows"]
    assert rows[0]["kv_values"] == 1_073_741_824
    manifest = json.loads((workdir / "report.json.manifest.json").read_text())
    assert manifest["subcommand"] == "analyze"
    assert str(out) in manifest["outputs"]


def test_analyze_csv_with_reference_and_figure(workdir):
    out = workdir / "report.csv"
    rc = main([
        "analyze", "--config", str(workdir / "small.json"), "--ref", str(workdir / "llama7b.json"),
        "--seq", "4096", "--ctx", "256,512,1024", "--out", str(out),
    ])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 1 + 2 * 3  # header + two configs x three contexts
    header = lines[0].split(",")
    row = dict(zip(header, lines[1].split(",")))
    assert 80.0 <= float(row["flops_reduction_pct"]) <= 86.0
    fig = workdir / "report_flops.png"
    assert fig.exists() and fig.stat().st_size > 1000
    assert fig.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_analyze_accepts_config_only_container(workdir, tmp_path):
    from transact.config import ModelConfig
    from transact.container import save_config

    box = tmp_path / "cfg.model"
    save_config(ModelConfig(**LLAMA_CFG), box)
    out = tmp_path / "r.json"
    rc = main(["analyze", "--config", str(box), "--out", str(out), "--no-figures"])
    assert rc == 0
    assert json.loads(out.read_text())["rows"][0]["kv_values"] == 1_073_741_824


def test_full_pipeline_under_60s_with_manifests(workdir):
    t0 = time.monotonic()
    stats = workdir / "stats.bin"
    rc = main([
        "calibrate", "--model", str(workdir / "tiny.model"), "--corpus", str(workdir / "train.tokens"),
        "--calib-samples", "16", "--calib-seqlen", "64", "--calib-seed", "0", "--out", str(stats),
    ])
    assert rc == 0
    pruned = workdir / "pruned.model"
    report = workdir / "prune_report.json"
    rc = main([
        "prune", "--model", str(workdir / "tiny.model"), "--stats", str(stats),
        "--target-heads", "2", "--target-mlp", "64", "--alpha", "1.0",
        "--metric", "transact", "--out", str(pruned), "--report", str(report),
    ])
    assert rc == 0
    evalout = workdir / "eval.json"
    rc = main([
        "eval", "--model", str(pruned), "--stream", str(workdir / "heldout.tokens"),
        "--window", "128", "--out", str(evalout),
    ])
    assert rc == 0
    assert time.monotonic() - t0 < 60.0

    for artifact in (stats, pruned, evalout):
        assert artifact.with_name(artifact.name + ".manifest.json").exists()
    back = load_model(pruned)
    assert back.config.n_heads == 2 and back.config.mlp_dim == 64
    payload = json.loads(report.read_text())
    assert payload["metric"]["alpha"] == 1.0
    assert payload["stats_provenance"]["token_count"] == 16 * 64
    assert len(payload["layers"][0]["keep_heads"]) == 2
    assert json.loads(evalout.read_text())["perplexity"] > 0


def test_prune_reports_reproducible_across_runs(workdir, tmp_path):
    args = lambda out, rep: [
        "prune", "--model", str(workdir / "tiny.model"), "--stats", str(workdir / "stats.bin"),
        "--target-heads", "2", "--target-mlp", "96", "--metric", "transact",
        "--out", str(out), "--report", str(rep),
    ]
    main(args(tmp_path / "a.model", tmp_path / "a.json"))
    main(args(tmp_path / "b.model", tmp_path / "b.json"))
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()
    assert (tmp_path / "a.model").read_bytes() == (tmp_path / "b.model").read_bytes()


def test_schedule_command(workdir, tmp_path):
    sched_cfg = tmp_path / "sched.json"
    sched_cfg.write_text(json.dumps({
        "target_heads": 2, "target_mlp": 64, "n_shots": 2, "interpolation": "linear",
        "recovery": "least_squares", "lambda": 1e-3, "recalibrate": True,
        "calib": {"samples": 8, "seqlen": 32},
        "seeds": {"calib": 0, "metric": 0},
    }))
    outdir = tmp_path / "run"
    rc = main([
        "schedule", "--config", str(sched_cfg), "--model", str(workdir / "tiny.model"),
        "--corpus", str(workdir / "train.tokens"), "--outdir", str(outdir),
    ])
    assert rc == 0
    assert (outdir / "shot_0.model").exists() and (outdir / "shot_1.model").exists()
    assert (outdir / "manifest.json").exists()
    log = json.loads((outdir / "schedule_log.json").read_text())
    assert log["shots"][-1]["target"]["n_heads"] == 2
    final = load_model(outdir / "shot_1.model")
    assert final.config.n_heads == 2 and final.config.mlp_dim == 64


def test_sweep_command_writes_csv_and_figure(workdir, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({
        "targets": [{"heads": 2, "mlp": 64}],
        "metrics": ["transact", "random"],
        "calib": {"samples": 4, "seqlen": 32},
        "window": 128,
        "holdout_tokens": 512,
        "base_seed": 0,
    }))
    out = tmp_path / "sweep.csv"
    rc = main([
        "sweep", "--grid", str(grid), "--model", str(workdir / "tiny.model"),
        "--corpus", str(workdir / "train.tokens"), "--seeds", "2", "--out", str(out),
    ])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 1 + 2 * 2  # header + metrics x seeds
    assert "perplexity" in lines[0]
    fig = tmp_path / "sweep_ppl.png"
    assert fig.exists() and fig.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    manifest = json.loads((tmp_path / "sweep.csv.manifest.json").read_text())
    assert manifest["params"]["seeds"] == 2


def test_missing_file_exit_3(workdir, capsys):
    rc = main(["eval", "--model", "nope.model", "--stream", str(workdir / "heldout.tokens"),
               "--out", str(workdir / "x.json")])
    assert rc == 3
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "missing_file"


def test_invalid_config_exit_4_names_field(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(LLAMA_CFG | {"head_dim": 15}))
    rc = main(["analyze", "--config", str(bad), "--out", str(tmp_path / "r.json")])
    assert rc == 4
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "invalid_config" and "head_dim" in err["message"]


def test_transact_metric_without_stats_exit_4(workdir, tmp_path, capsys):
    rc = main([
        "prune", "--model", str(workdir / "tiny.model"), "--target-heads", "2",
        "--target-mlp", "64", "--out", str(tmp_path / "o.model"), "--report", str(tmp_path / "r.json"),
    ])
    assert rc == 4
    assert "--stats" in json.loads(capsys.readouterr().err)["message"]


def test_schedule_config_missing_seeds_exit_4(workdir, tmp_path, capsys):
    bad = tmp_path / "sched.json"
    bad.write_text(json.dumps({"target_heads": 2, "target_mlp": 64, "n_shots": 1}))
    rc = main([
        "schedule", "--config", str(bad), "--model", str(workdir / "tiny.model"),
        "--corpus", str(workdir / "train.tokens"), "--outdir", str(tmp_path / "d"),
    ])
    assert rc == 4
    assert "seeds" in json.loads(capsys.readouterr().err)["message"]
