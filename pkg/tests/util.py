"""Independent oracles shared by the test suite.

``ref_forward`` is a straight-line reimplementation of the forward pass:
float64, per-position python loops, no batching or einsum, plus optional
mid-flight masking of transitional activations. It deliberately shares no
code with the package so the two can only agree by computing the same math.
"""

from __future__ import annotations

import math

import numpy as np

from transact.model import ModelWeights
from transact.pruner import SalienceReport, head_columns


def ref_rmsnorm(x, w, eps):
    out = np.empty_like(x)
    for t in range(x.shape[0]):
        ms = 0.0
        for j in range(x.shape[1]):
            ms += x[t, j] * x[t, j]
        ms /= x.shape[1]
        r = 1.0 / math.sqrt(ms + eps)
        out[t] = x[t] * r * w
    return out


def ref_forward(model: ModelWeights, ids, head_mask=None, channel_mask=None) -> np.ndarray:
    """Logits in float64. Masks are per-layer boolean keep-arrays; masked
    (False) heads/channels have their transitional activation zeroed."""
    cfg = model.config
    t_len = len(ids)
    a_n, a_d = cfg.n_heads, cfg.head_dim
    half = a_d // 2
    inv_freq = [cfg.rope_theta ** (-2.0 * i / a_d) for i in range(half)]

    def act(x):
        if cfg.activation == "silu":
            return x / (1.0 + np.exp(-x))
        if cfg.activation == "relu":
            return np.maximum(x, 0.0)
        return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))

    def rope_vec(vec, pos):
        out = vec.copy()
        for i in range(half):
            angle = pos * inv_freq[i]
            c, s = math.cos(angle), math.sin(angle)
            e, o = vec[2 * i], vec[2 * i + 1]
            out[2 * i] = e * c - o * s
            out[2 * i + 1] = e * s + o * c
        return out

    h = model.embed[np.asarray(ids)].astype(np.float64)
    for l, lw in enumerate(model.layers):
        x = ref_rmsnorm(h, lw.attn_norm.astype(np.float64), cfg.norm_eps)
        wq, wk, wv, wo = (m.astype(np.float64) for m in (lw.wq, lw.wk, lw.wv, lw.wo))
        q_all = x @ wq
        k_all = x @ wk
        v_all = x @ wv
        act_a = np.zeros((t_len, a_n, a_d))
        for head in range(a_n):
            lo, hi = head * a_d, (head + 1) * a_d
            qs = [rope_vec(q_all[t, lo:hi], t) for t in range(t_len)]
            ks = [rope_vec(k_all[t, lo:hi], t) for t in range(t_len)]
            for t in range(t_len):
                scores = np.array([qs[t] @ ks[s] / math.sqrt(a_d) for s in range(t + 1)])
                scores -= scores.max()
                weights = np.exp(scores)
                weights /= weights.sum()
                acc = np.zeros(a_d)
                for s in range(t + 1):
                    acc += weights[s] * v_all[s, lo:hi]
                act_a[t, head] = acc
        if head_mask is not None:
            act_a = act_a * np.asarray(head_mask[l], dtype=np.float64)[None, :, None]
        h = h + act_a.reshape(t_len, a_n * a_d) @ wo

        x = ref_rmsnorm(h, lw.mlp_norm.astype(np.float64), cfg.norm_eps)
        up = x @ lw.wu.astype(np.float64)
        if cfg.has_gate:
            act_p = act(x @ lw.wg.astype(np.float64)) * up
        else:
            act_p = act(up)
        if channel_mask is not None:
            act_p = act_p * np.asarray(channel_mask[l], dtype=np.float64)[None, :]
        h = h + act_p @ lw.wd.astype(np.float64)

    h = ref_rmsnorm(h, model.final_norm.astype(np.float64), cfg.norm_eps)
    return h @ model.lm_head.astype(np.float64)


def mask_model(model: ModelWeights, report: SalienceReport) -> ModelWeights:
    """Weight-space masking oracle for pruning equivalence.

    Zeroing a head's value columns zeroes its transitional activation exactly
    (attention probabilities are unaffected); zeroing an up-projection column
    zeroes that MLP channel exactly because every supported activation maps
    0 to 0. The architecture is unchanged -- only activations vanish.
    """
    import copy

    masked = copy.deepcopy(model)
    cfg = model.config
    for l, ls in enumerate(report.layers):
        keep_cols = set(head_columns(np.asarray(ls.keep_heads), cfg.head_dim).tolist())
        drop_cols = [c for c in range(cfg.attn_dim) if c not in keep_cols]
        masked.layers[l].wv[:, drop_cols] = 0.0
        keep_ch = set(np.asarray(ls.keep_channels).tolist())
        drop_ch = [c for c in range(cfg.mlp_dim) if c not in keep_ch]
        masked.layers[l].wu[:, drop_ch] = 0.0
    return masked


def random_report(model: ModelWeights, n_heads: int, n_channels: int, seed: int) -> SalienceReport:
    """Report with uniformly random keep-sets of the requested sizes."""
    from transact.pruner import LayerSalience, MetricConfig, PruneTarget

    cfg = model.config
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(cfg.n_layers):
        kh = np.sort(rng.choice(cfg.n_heads, size=n_heads, replace=False))
        kc = np.sort(rng.choice(cfg.mlp_dim, size=n_channels, replace=False))
        layers.append(
            LayerSalience(
                head_scores=np.zeros(cfg.n_heads),
                mlp_scores=np.zeros(cfg.mlp_dim),
                keep_heads=kh.astype(np.int64),
                keep_channels=kc.astype(np.int64),
            )
        )
    return SalienceReport(
        layers=layers,
        metric=MetricConfig(metric="random", random_seed=seed),
        target=PruneTarget(n_heads=n_heads, mlp_dim=n_channels),
        token_count=0,
    )
