"""Desk-scale fixtures: synthetic corpora, random models, and a tiny trainer.

Tests and demos need a *trained* tiny model so that activation statistics
carry real structure; external data is out of the question. The corpus is a
seeded first-order Markov chain with a few dominant successors per state,
and the trainer is a plain float64 Adam loop with hand-written gradients for
exactly the architecture the toolkit runs. The trained weights are cast to
float32 and handed back as a standard model.

The gradient code is fixture tooling, not part of the pruning pipeline; it
is validated against finite differences in the test suite.

Run ``python -m transact.toy OUTDIR`` to materialize a demo corpus and a
small trained model for the CLI walkthrough.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .model import LayerWeights, ModelWeights

F32 = np.float32


# ---------------------------------------------------------------------------
# corpus

def markov_transitions(vocab_size: int, seed: int, sharpness: float = 3.0) -> np.ndarray:
    """Row-stochastic transition matrix with a few dominant successors per state."""
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(vocab_size, vocab_size)) * sharpness
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    return probs / probs.sum(axis=1, keepdims=True)


def markov_corpus(vocab_size: int, length: int, seed: int, sharpness: float = 3.0) -> np.ndarray:
    """Seeded token stream sampled from a fixed Markov chain."""
    probs = markov_transitions(vocab_size, seed, sharpness)
    cum = np.cumsum(probs, axis=1)
    rng = np.random.default_rng(seed + 1)
    draws = rng.random(length)
    out = np.empty(length, dtype=np.int64)
    state = int(rng.integers(vocab_size))
    for i in range(length):
        state = int(np.searchsorted(cum[state], draws[i]))
        state = min(state, vocab_size - 1)
        out[i] = state
    return out


# ---------------------------------------------------------------------------
# parameters

def _param_names(cfg: ModelConfig) -> list[str]:
    names = ["embed", "lm_head", "final_norm"]
    for l in range(cfg.n_layers):
        names += [f"{l}.wq", f"{l}.wk", f"{l}.wv", f"{l}.wo", f"{l}.attn_norm"]
        if cfg.has_gate:
            names.append(f"{l}.wg")
        names += [f"{l}.wu", f"{l}.wd", f"{l}.mlp_norm"]
    return names


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Float64 parameter dict with 1/sqrt(fan_in) projection scales."""
    rng = np.random.default_rng(seed)
    h, a, p, v = cfg.hidden_dim, cfg.attn_dim, cfg.mlp_dim, cfg.vocab_size
    depth = max(cfg.n_layers, 1)

    def mat(rows, cols, scale):
        return rng.normal(size=(rows, cols)) * scale

    params = {
        "embed": mat(v, h, 0.5),
        "lm_head": mat(h, v, 1.0 / np.sqrt(h)),
        "final_norm": np.ones(h),
    }
    for l in range(cfg.n_layers):
        params[f"{l}.wq"] = mat(h, a, 1.0 / np.sqrt(h))
        params[f"{l}.wk"] = mat(h, a, 1.0 / np.sqrt(h))
        params[f"{l}.wv"] = mat(h, a, 1.0 / np.sqrt(h))
        params[f"{l}.wo"] = mat(a, h, 1.0 / np.sqrt(a * 2 * depth))
        params[f"{l}.attn_norm"] = np.ones(h)
        if cfg.has_gate:
            params[f"{l}.wg"] = mat(h, p, 1.0 / np.sqrt(h))
        params[f"{l}.wu"] = mat(h, p, 1.0 / np.sqrt(h))
        params[f"{l}.wd"] = mat(p, h, 1.0 / np.sqrt(p * 2 * depth))
        params[f"{l}.mlp_norm"] = np.ones(h)
    return params


def params_to_model(params: dict[str, np.ndarray], cfg: ModelConfig) -> ModelWeights:
    layers = [
        LayerWeights(
            wq=params[f"{l}.wq"].astype(F32),
            wk=params[f"{l}.wk"].astype(F32),
            wv=params[f"{l}.wv"].astype(F32),
            wo=params[f"{l}.wo"].astype(F32),
            attn_norm=params[f"{l}.attn_norm"].astype(F32),
            wg=params[f"{l}.wg"].astype(F32) if cfg.has_gate else None,
            wu=params[f"{l}.wu"].astype(F32),
            wd=params[f"{l}.wd"].astype(F32),
            mlp_norm=params[f"{l}.mlp_norm"].astype(F32),
        )
        for l in range(cfg.n_layers)
    ]
    model = ModelWeights(
        config=cfg,
        layers=layers,
        embed=params["embed"].astype(F32),
        final_norm=params["final_norm"].astype(F32),
        lm_head=params["lm_head"].astype(F32),
    )
    return model.validate()


def init_random_model(cfg: ModelConfig, seed: int) -> ModelWeights:
    """Untrained float32 model with healthy activation scales."""
    return params_to_model(init_params(cfg.validate(), seed), cfg)


# ---------------------------------------------------------------------------
# differentiable forward/backward (float64, batched)

def _rope_tables(head_dim: int, n_pos: int, theta: float):
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(np.arange(n_pos, dtype=np.float64), inv_freq)
    return np.cos(angles), np.sin(angles)


def _rope(x, cos, sin):
    even, odd = x[..., 0::2], x[..., 1::2]
    c = cos[None, :, None, :]
    s = sin[None, :, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def _rope_back(g, cos, sin):
    ge, go = g[..., 0::2], g[..., 1::2]
    c = cos[None, :, None, :]
    s = sin[None, :, None, :]
    out = np.empty_like(g)
    out[..., 0::2] = ge * c + go * s
    out[..., 1::2] = -ge * s + go * c
    return out


def _rmsnorm_fwd(x, w, eps):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * w, inv


def _rmsnorm_back(g, x, w, inv):
    gw = (g * x * inv).sum(axis=tuple(range(g.ndim - 1)))
    gs = g * w
    gx = gs * inv - x * inv**3 * np.mean(gs * x, axis=-1, keepdims=True)
    return gx, gw


def _act_fwd(x, kind):
    if kind == "silu":
        sig = 1.0 / (1.0 + np.exp(-x))
        return x * sig, sig
    if kind == "relu":
        return np.maximum(x, 0.0), None
    sq = np.sqrt(2.0 / np.pi)
    inner = sq * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    return 0.5 * x * (1.0 + th), th


def _act_back(g, x, kind, cache):
    if kind == "silu":
        sig = cache
        return g * sig * (1.0 + x * (1.0 - sig))
    if kind == "relu":
        return g * (x > 0.0)
    th = cache
    sq = np.sqrt(2.0 / np.pi)
    dinner = sq * (1.0 + 3 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)


def loss_and_grads(params: dict[str, np.ndarray], cfg: ModelConfig, ids: np.ndarray):
    """Mean next-token cross-entropy over a [B, T] batch, with gradients."""
    b, t = ids.shape
    n, d = cfg.n_heads, cfg.head_dim
    a = n * d
    eps = cfg.norm_eps
    scale = 1.0 / np.sqrt(d)
    cos, sin = _rope_tables(d, t, cfg.rope_theta)
    causal = np.triu(np.full((t, t), -np.inf), k=1)

    h = params["embed"][ids]
    caches = []
    for l in range(cfg.n_layers):
        h_in = h
        x1, inv1 = _rmsnorm_fwd(h_in, params[f"{l}.attn_norm"], eps)
        q = (x1 @ params[f"{l}.wq"]).reshape(b, t, n, d)
        k = (x1 @ params[f"{l}.wk"]).reshape(b, t, n, d)
        v = (x1 @ params[f"{l}.wv"]).reshape(b, t, n, d)
        qr, kr = _rope(q, cos, sin), _rope(k, cos, sin)
        scores = np.einsum("btnd,bsnd->bnts", qr, kr) * scale + causal
        shifted = scores - scores.max(axis=-1, keepdims=True)
        ex = np.exp(shifted)
        probs = ex / ex.sum(axis=-1, keepdims=True)
        act_a = np.einsum("bnts,bsnd->btnd", probs, v)
        h_mid = h_in + act_a.reshape(b, t, a) @ params[f"{l}.wo"]

        x2, inv2 = _rmsnorm_fwd(h_mid, params[f"{l}.mlp_norm"], eps)
        up = x2 @ params[f"{l}.wu"]
        if cfg.has_gate:
            gate = x2 @ params[f"{l}.wg"]
            gact, acache = _act_fwd(gate, cfg.activation)
            act_p = gact * up
        else:
            gate, gact = None, None
            act_p, acache = _act_fwd(up, cfg.activation)
        h = h_mid + act_p @ params[f"{l}.wd"]
        caches.append((h_in, x1, inv1, qr, kr, v, probs, act_a, h_mid, x2, inv2, up, gate, gact, acache, act_p))

    hf, invf = _rmsnorm_fwd(h, params["final_norm"], eps)
    logits = hf @ params["lm_head"]

    shifted = logits[:, :-1] - logits[:, :-1].max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    probs_lm = ex / ex.sum(axis=-1, keepdims=True)
    targets = ids[:, 1:]
    n_pred = b * (t - 1)
    bi, ti = np.meshgrid(np.arange(b), np.arange(t - 1), indexing="ij")
    nll = -np.log(probs_lm[bi, ti, targets])
    loss = float(nll.mean())

    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    dlogits = np.zeros_like(logits)
    dsoft = probs_lm.copy()
    dsoft[bi, ti, targets] -= 1.0
    dlogits[:, :-1] = dsoft / n_pred

    grads["lm_head"] += np.einsum("bth,btv->hv", hf, dlogits)
    dhf = dlogits @ params["lm_head"].T
    dh, gw = _rmsnorm_back(dhf, h, params["final_norm"], invf)
    grads["final_norm"] += gw

    for l in reversed(range(cfg.n_layers)):
        (h_in, x1, inv1, qr, kr, v, probs, act_a, h_mid, x2, inv2, up, gate, gact, acache, act_p) = caches[l]
        # MLP block
        dact_p = dh @ params[f"{l}.wd"].T
        grads[f"{l}.wd"] += np.einsum("btp,bth->ph", act_p, dh)
        if cfg.has_gate:
            dgact = dact_p * up
            dup = dact_p * gact
            dgate = _act_back(dgact, gate, cfg.activation, acache)
            grads[f"{l}.wg"] += np.einsum("bth,btp->hp", x2, dgate)
            dx2 = dgate @ params[f"{l}.wg"].T
        else:
            dup = _act_back(dact_p, up, cfg.activation, acache)
            dx2 = np.zeros_like(x2)
        grads[f"{l}.wu"] += np.einsum("bth,btp->hp", x2, dup)
        dx2 = dx2 + dup @ params[f"{l}.wu"].T
        dh_mid, gw = _rmsnorm_back(dx2, h_mid, params[f"{l}.mlp_norm"], inv2)
        grads[f"{l}.mlp_norm"] += gw
        dh_mid = dh_mid + dh  # residual

        # attention block
        dact_flat = dh_mid @ params[f"{l}.wo"].T
        grads[f"{l}.wo"] += np.einsum("bta,bth->ah", act_a.reshape(*act_a.shape[:2], -1), dh_mid)
        dact = dact_flat.reshape(act_a.shape)
        dprobs = np.einsum("btnd,bsnd->bnts", dact, v)
        dv = np.einsum("bnts,btnd->bsnd", probs, dact)
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dqr = np.einsum("bnts,bsnd->btnd", dscores, kr) * scale
        dkr = np.einsum("bnts,btnd->bsnd", dscores, qr) * scale
        dq = _rope_back(dqr, cos, sin).reshape(x1.shape[0], x1.shape[1], -1)
        dk = _rope_back(dkr, cos, sin).reshape(x1.shape[0], x1.shape[1], -1)
        dvf = dv.reshape(x1.shape[0], x1.shape[1], -1)
        grads[f"{l}.wq"] += np.einsum("bth,bta->ha", x1, dq)
        grads[f"{l}.wk"] += np.einsum("bth,bta->ha", x1, dk)
        grads[f"{l}.wv"] += np.einsum("bth,bta->ha", x1, dvf)
        dx1 = dq @ params[f"{l}.wq"].T + dk @ params[f"{l}.wk"].T + dvf @ params[f"{l}.wv"].T
        dh_in, gw = _rmsnorm_back(dx1, h_in, params[f"{l}.attn_norm"], inv1)
        grads[f"{l}.attn_norm"] += gw
        dh = dh_in + dh_mid  # residual

    np.add.at(grads["embed"], ids, dh)
    return loss, grads


def train_toy_model(
    cfg: ModelConfig,
    corpus: np.ndarray,
    *,
    steps: int = 300,
    batch_size: int = 16,
    seq_len: int = 64,
    lr: float = 3e-3,
    seed: int = 0,
) -> ModelWeights:
    """Adam training loop; returns the converged weights as a float32 model."""
    cfg.validate()
    corpus = np.asarray(corpus).ravel()
    if corpus.size < seq_len + 1:
        raise ValueError("corpus too short for the requested seq_len")
    params = init_params(cfg, seed)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(seed + 7)
    beta1, beta2, adam_eps = 0.9, 0.95, 1e-8

    for step in range(1, steps + 1):
        starts = rng.integers(0, corpus.size - seq_len, size=batch_size)
        ids = np.stack([corpus[s : s + seq_len] for s in starts])
        _, grads = loss_and_grads(params, cfg, ids)
        for key in params:
            g = grads[key]
            m[key] = beta1 * m[key] + (1 - beta1) * g
            v2[key] = beta2 * v2[key] + (1 - beta2) * g * g
            mhat = m[key] / (1 - beta1**step)
            vhat = v2[key] / (1 - beta2**step)
            params[key] -= lr * mhat / (np.sqrt(vhat) + adam_eps)
    return params_to_model(params, cfg)


TOY_CONFIG = ModelConfig(
    n_layers=2,
    hidden_dim=64,
    n_heads=4,
    head_dim=16,
    mlp_dim=128,
    vocab_size=64,
    max_seq_len=256,
)


def _main() -> int:  # pragma: no cover - demo helper
    import sys
    from pathlib import Path
    from .calib import write_token_stream
    from .container import save_model

    outdir = Path(sys.argv[1] if len(sys.argv) > 1 else "demo")
    outdir.mkdir(parents=True, exist_ok=True)
    corpus = markov_corpus(TOY_CONFIG.vocab_size, 200_000, seed=0)
    write_token_stream(corpus[:160_000], outdir / "train.tokens")
    write_token_stream(corpus[160_000:], outdir / "heldout.tokens")
    model = train_toy_model(TOY_CONFIG, corpus[:160_000], steps=400, seed=0)
    save_model(model, outdir / "tiny.model")
    print(f"wrote {outdir}/tiny.model and token streams")
    return 0


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(_main())
