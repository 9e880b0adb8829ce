"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
report. Two parameter-total checks are strict expected failures: the nominal
"2.6B"/"1.3B" size names these compact architectures circulate under sit
2.15%/2.38% away from their exact element counts (2,544,111,616 and
1,269,043,200), so a 2% label tolerance is unreachable by any accounting
that also reproduces the exact per-module counts. The remaining size,
cache, and FLOPs figures reproduce exactly or within their tolerances.
"""

import json
import time

import numpy as np
import pytest

from transact.analytics import count_params, flops_estimate, kv_cache_values, reduction_pct_display
from transact.calib import CalibSet, collect_stats
from transact.config import ModelConfig
from transact.container import load_model, save_model, tensor_element_count
from transact.evaluate import compare_metrics, perplexity
from transact.model import forward
from transact.pruner import MetricConfig, PruneTarget, build_report, head_salience, mlp_salience, prune_model, select_topk
from transact.recovery import least_squares_recovery
from transact.schedule import plan_schedule, run_schedule
from transact.toy import TOY_CONFIG, init_random_model, markov_corpus

from util import mask_model, random_report

LLAMA2_7B = ModelConfig(
    n_layers=32, hidden_dim=4096, n_heads=32, head_dim=128,
    mlp_dim=11008, vocab_size=32000, max_seq_len=4096,
)
COMPACT_2_6B = LLAMA2_7B.with_dims(n_heads=16, mlp_dim=3072)
COMPACT_1_3B = LLAMA2_7B.with_dims(n_heads=6, mlp_dim=1536)


def test_criterion_1_size_and_cache_accounting():
    t0 = time.monotonic()
    assert kv_cache_values(LLAMA2_7B, 4096) == 1_073_741_824
    assert kv_cache_values(COMPACT_2_6B, 4096) == 536_870_912
    assert kv_cache_values(COMPACT_1_3B, 4096) == 201_326_592
    assert [kv_cache_values(c, 4096) // 10**6 for c in (LLAMA2_7B, COMPACT_2_6B, COMPACT_1_3B)] == [1073, 536, 201]

    base = kv_cache_values(LLAMA2_7B, 4096)
    assert reduction_pct_display(kv_cache_values(COMPACT_2_6B, 4096), base) == 50
    assert reduction_pct_display(kv_cache_values(COMPACT_1_3B, 4096), base) == 81

    counts = count_params(COMPACT_2_6B)
    assert counts.mha_per_layer == 33_554_432
    assert counts.mlp_per_layer == 37_748_736

    # untied embeddings assumption, documented: totals below count embed and
    # LM head separately, which is what reproduces the source model's 6.7B
    total_7b = count_params(LLAMA2_7B).total
    assert abs(total_7b - 6.7e9) / 6.7e9 <= 0.02
    assert total_7b == 6_738_415_616

    elapsed = time.monotonic() - t0
    assert elapsed < 1.0
    print(
        f"\ncriterion 1 PASS - KV 1073M/536M/201M exact, -50%/-81% exact, "
        f"MHA 33.5M / MLP 37.7M exact, 6.7B total +0.57% ({elapsed*1e3:.0f} ms) "
        f"[2.6B/1.3B labels: see xfail cases]"
    )


@pytest.mark.parametrize(
    "cfg,label",
    [
        pytest.param(
            COMPACT_2_6B, 2.6e9,
            marks=pytest.mark.xfail(
                strict=True,
                reason="exact count 2,544,111,616 is -2.15% vs the nominal 2.6B size label; "
                "unreachable at +/-2% given the exact 33.5M/37.7M module counts",
            ),
            id="label-2.6B",
        ),
        pytest.param(
            COMPACT_1_3B, 1.3e9,
            marks=pytest.mark.xfail(
                strict=True,
                reason="exact count 1,269,043,200 is -2.38% vs the nominal 1.3B size label",
            ),
            id="label-1.3B",
        ),
    ],
)
def test_criterion_1_param_total_labels(cfg, label):
    total = count_params(cfg).total
    assert abs(total - label) / label <= 0.02


def test_criterion_2_flops_claim():
    t0 = time.monotonic()
    big = flops_estimate(LLAMA2_7B, ctx_len=256).decode_per_token
    small = flops_estimate(COMPACT_1_3B, ctx_len=256).decode_per_token
    reduction = 100.0 * (1.0 - small / big)
    assert abs(reduction - 83.0) <= 3.0

    ctxs = [256, 512, 1024, 2048, 4096]
    wide = [flops_estimate(LLAMA2_7B, c).prefill for c in ctxs]
    narrow = [flops_estimate(COMPACT_2_6B, c).prefill for c in ctxs]
    for (w0, w1), (n0, n1) in zip(zip(wide, wide[1:]), zip(narrow, narrow[1:])):
        assert n1 - n0 < w1 - w0
    elapsed = time.monotonic() - t0
    assert elapsed < 1.0
    print(
        f"\ncriterion 2 PASS - compact model at ctx=256 is -{reduction:.1f}% FLOPs "
        f"(target -83 +/- 3), narrow-attention curve grows slower ({elapsed*1e3:.0f} ms)"
    )


def test_criterion_3_masking_equivalence_100_models():
    t0 = time.monotonic()
    rng = np.random.default_rng(2024)
    n_models = 100
    worst = 0.0
    for trial in range(n_models):
        cfg = ModelConfig(
            n_layers=int(rng.integers(1, 5)),
            hidden_dim=int(rng.choice([32, 48, 64, 96, 128])),
            n_heads=int(rng.integers(2, 9)),
            head_dim=16,
            mlp_dim=int(rng.integers(32, 257)),
            vocab_size=61,
            has_gate=bool(rng.integers(0, 2)),
            activation=str(rng.choice(["silu", "relu", "gelu"])),
            max_seq_len=64,
        )
        model = init_random_model(cfg, seed=trial)
        keep_heads = int(rng.integers(1, cfg.n_heads + 1))
        keep_channels = int(rng.integers(1, cfg.mlp_dim + 1))
        report = random_report(model, keep_heads, keep_channels, seed=10_000 + trial)
        pruned = prune_model(model, report)
        masked = mask_model(model, report)
        ids = rng.integers(0, cfg.vocab_size, size=int(rng.integers(4, 21)))
        diff = np.abs(forward(pruned, ids).logits - forward(masked, ids).logits).max()
        worst = max(worst, float(diff))
        assert diff <= 1e-5, f"model {trial}: masking diff {diff:.2e}"
    elapsed = time.monotonic() - t0
    assert elapsed < 300.0
    print(
        f"\ncriterion 3 PASS - {n_models} randomized models, worst masked-vs-pruned "
        f"logit diff {worst:.2e} <= 1e-5 ({elapsed:.1f} s)"
    )


def test_criterion_4_salience_and_topk_oracles(tiny_model):
    t0 = time.monotonic()
    corpus = markov_corpus(64, 4000, seed=400)
    calib = CalibSet.draw(corpus, 4, 32, seed=0)
    stats = collect_stats(tiny_model, calib)

    acts_a = [[] for _ in range(2)]
    acts_p = [[] for _ in range(2)]
    for row in calib.samples:
        trace = forward(tiny_model, row, collect_attn=True, collect_mlp=True)
        for l in range(2):
            acts_a[l].append(trace.act_a[l])
            acts_p[l].append(trace.act_p[l])
    for l in range(2):
        a = np.concatenate(acts_a[l]).astype(np.float64)
        p = np.concatenate(acts_p[l]).astype(np.float64)
        norms = np.sqrt((a * a).sum(axis=0))
        for alpha in (0.0, 1.0, 2.0):
            expected = norms.mean(axis=1) + alpha * norms.max(axis=1)
            got = head_salience(stats, l, MetricConfig(alpha=alpha))
            np.testing.assert_allclose(got, expected, rtol=1e-6)
        np.testing.assert_allclose(mlp_salience(stats, l), np.sqrt((p * p).sum(axis=0)), rtol=1e-6)

    rng = np.random.default_rng(41)
    n_vectors = 10_000
    for i in range(n_vectors):
        n = int(rng.integers(1, 33))
        if i % 2:
            scores = rng.choice([0.0, 1.0, 2.0, 5.0], size=n)  # dense ties
        else:
            scores = rng.normal(size=n)
        k = int(rng.integers(1, n + 1))
        got = select_topk(scores, k)
        order = sorted(range(n), key=lambda j: (-scores[j], j))
        assert got.tolist() == sorted(order[:k])
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    print(
        f"\ncriterion 4 PASS - streaming salience matches brute force at 1e-6, "
        f"top-k matches sort oracle on {n_vectors} vectors with ties ({elapsed:.1f} s)"
    )


def test_criterion_5_schedule_invariants(tiny_model):
    t0 = time.monotonic()
    checked = 0
    for src_heads, src_mlp in ((8, 160), (32, 11008), (5, 63)):
        src = ModelConfig(
            n_layers=1, hidden_dim=64, n_heads=src_heads, head_dim=16,
            mlp_dim=src_mlp, vocab_size=32, max_seq_len=64,
        )
        for tgt_heads in sorted({1, src_heads // 2 or 1, src_heads}):
            for tgt_mlp in sorted({1, src_mlp // 2 or 1, src_mlp}):
                for n_shots in range(1, 17):
                    for mode in ("linear", "geometric"):
                        sched = plan_schedule(src, PruneTarget(tgt_heads, tgt_mlp), n_shots, mode)
                        prev_h, prev_p = src.n_heads, src.mlp_dim
                        for shot in sched.shots:
                            assert isinstance(shot.n_heads, int) and shot.n_heads >= 1
                            assert shot.n_heads <= prev_h and shot.mlp_dim <= prev_p
                            prev_h, prev_p = shot.n_heads, shot.mlp_dim
                        assert sched.shots[-1] == PruneTarget(tgt_heads, tgt_mlp)
                        assert abs(sum(sched.ratios) - sched.total_ratio) <= 1e-12
                        checked += 1

    # 1-shot schedule is the direct prune
    corpus = markov_corpus(64, 8000, seed=500)
    metric = MetricConfig()
    sched = plan_schedule(tiny_model.config, PruneTarget(2, 64), 1)
    via_schedule, _ = run_schedule(
        tiny_model, corpus, sched, metric, calib_samples=6, calib_seqlen=32, calib_seed=1
    )
    stats = collect_stats(tiny_model, CalibSet.draw(corpus, 6, 32, seed=1))
    direct = prune_model(tiny_model, build_report(tiny_model, stats, PruneTarget(2, 64), metric))
    for a, b in zip(via_schedule.layers, direct.layers):
        np.testing.assert_array_equal(a.wq, b.wq)
        np.testing.assert_array_equal(a.wd, b.wd)
    elapsed = time.monotonic() - t0
    print(
        f"\ncriterion 5 PASS - {checked} (source,target,shots<=16) plans keep integral, "
        f"monotone, exact-final targets; 1-shot == direct prune ({elapsed:.1f} s)"
    )


def test_criterion_6_recovery_improvement():
    t0 = time.monotonic()
    rng = np.random.default_rng(600)
    for trial in range(8):
        t, d, d_keep, h = 512, 48, 32, 16
        x_full = rng.normal(size=(t, d))
        w_full = rng.normal(size=(d, h))
        keep = np.sort(rng.choice(d, size=d_keep, replace=False))
        lam = 1e-6
        w_new, info = least_squares_recovery(x_full, x_full[:, keep], w_full, lam=lam, keep=keep)

        # independent dense normal-equations solve
        x, y = x_full[:, keep], x_full @ w_full
        oracle = np.linalg.inv(x.T @ x + lam * np.eye(d_keep)) @ (x.T @ y + lam * w_full[keep])
        np.testing.assert_allclose(w_new, oracle, rtol=1e-5)
        assert info.mse_after < info.mse_before  # strict: pruned mass is nonzero
    elapsed = time.monotonic() - t0
    print(
        f"\ncriterion 6 PASS - least-squares recovery strictly lowers reconstruction "
        f"MSE and matches the dense solve at 1e-5 ({elapsed:.1f} s)"
    )


def test_criterion_7_metric_quality_at_desk_scale(trained_model, toy_corpus):
    t0 = time.monotonic()
    # 50% of heads and channels, >= 5 seeds, transact vs random
    rows = compare_metrics(
        trained_model,
        toy_corpus,
        targets=[PruneTarget(TOY_CONFIG.n_heads // 2, TOY_CONFIG.mlp_dim // 2)],
        metrics=["transact", "random"],
        seeds=[0, 1, 2, 3, 4],
        calib_samples=32,
        calib_seqlen=64,
        window=128,
        holdout_tokens=4096,
    )
    ppl = {"transact": [], "random": []}
    for row in rows:
        ppl[row["metric"]].append(row["perplexity"])
    mean_transact = float(np.mean(ppl["transact"]))
    mean_random = float(np.mean(ppl["random"]))
    assert mean_transact <= mean_random

    # pruning exactly the zero-salience structure changes perplexity by nothing
    import copy

    doctored = copy.deepcopy(trained_model)
    dead_heads, dead_channels = [1, 3], list(range(0, 128, 4))
    for lw in doctored.layers:
        for head in dead_heads:
            lw.wv[:, head * 16 : (head + 1) * 16] = 0.0
        for c in dead_channels:
            lw.wu[:, c] = 0.0
    keep_heads = np.array([h for h in range(4) if h not in dead_heads], dtype=np.int64)
    keep_channels = np.array([c for c in range(128) if c not in dead_channels], dtype=np.int64)
    report = random_report(doctored, keep_heads.size, keep_channels.size, seed=0)
    for ls in report.layers:
        ls.keep_heads = keep_heads
        ls.keep_channels = keep_channels
    pruned = prune_model(doctored, report)
    heldout = toy_corpus[50_000:][:2048]
    ppl_full = perplexity(doctored, heldout, window=128).perplexity
    ppl_pruned = perplexity(pruned, heldout, window=128).perplexity
    rel_change = abs(ppl_pruned - ppl_full) / ppl_full
    assert rel_change <= 1e-5

    elapsed = time.monotonic() - t0
    assert elapsed < 900.0
    print(
        f"\ncriterion 7 PASS - mean ppl transact {mean_transact:.3f} <= random {mean_random:.3f} "
        f"over 5 seeds at 50% pruning; zero-salience prune changes ppl by {rel_change:.1e} ({elapsed:.1f} s)"
    )


def test_criterion_8_determinism_and_roundtrip(tiny_model, tmp_path):
    t0 = time.monotonic()
    corpus = markov_corpus(64, 8000, seed=800)

    def one_run():
        calib = CalibSet.draw(corpus, 8, 32, seed=4)
        stats = collect_stats(tiny_model, calib)
        report = build_report(tiny_model, stats, PruneTarget(2, 64), MetricConfig(alpha=1.0))
        return report

    ra, rb = one_run(), one_run()
    assert json.dumps(ra.to_dict()) == json.dumps(rb.to_dict())

    pruned = prune_model(tiny_model, ra)
    path = tmp_path / "pruned.model"
    save_model(pruned, path)
    back = load_model(path)
    for a, b in zip(back.layers, pruned.layers):
        np.testing.assert_array_equal(a.wq, b.wq)
        np.testing.assert_array_equal(a.wo, b.wo)
        np.testing.assert_array_equal(a.wu, b.wu)
        np.testing.assert_array_equal(a.wd, b.wd)
    np.testing.assert_array_equal(back.embed, pruned.embed)

    assert tensor_element_count(path) == count_params(pruned.config).total
    elapsed = time.monotonic() - t0
    print(
        f"\ncriterion 8 PASS - identical seeds give identical reports, save/load is "
        f"bitwise, file element count == count_params ({elapsed:.1f} s)"
    )
