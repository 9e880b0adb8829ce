"""Weight containers and the deterministic forward pass.

Conventions, fixed across the whole toolkit:

* all compute and storage is float32;
* pre-norm residual blocks with RMS normalization, norm vectors of width H;
* rotary embedding rotates interleaved pairs ``(2i, 2i+1)`` inside each head,
  with angle ``pos * theta**(-2i/head_dim)`` -- per head, so removing whole
  heads never changes the rotation of surviving heads;
* causal softmax attention scaled by ``1/sqrt(head_dim)``;
* the attention transitional activation ``act_a`` is the per-head attention
  output before the output projection, shape ``[tokens, n_heads, head_dim]``;
* the MLP transitional activation ``act_p`` is the (optionally gated)
  activated up-projection before the down projection, shape ``[tokens, mlp_dim]``.

The forward either returns the requested taps materialized in a
:class:`ForwardTrace`, or streams them layer-by-layer to a consumer callback
so long calibration runs never hold more than one layer's activations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, ForwardError

F32 = np.float32

# consumer(layer_index, act_a [T, A_n, A_d], act_p [T, P]) -> None
TapConsumer = Callable[[int, np.ndarray, np.ndarray], None]


@dataclass
class LayerWeights:
    wq: np.ndarray          # [H, A]
    wk: np.ndarray          # [H, A]
    wv: np.ndarray          # [H, A]
    wo: np.ndarray          # [A, H]
    wu: np.ndarray          # [H, P]
    wd: np.ndarray          # [P, H]
    attn_norm: np.ndarray   # [H]
    mlp_norm: np.ndarray    # [H]
    wg: Optional[np.ndarray] = None  # [H, P], present iff config.has_gate


@dataclass
class ModelWeights:
    config: ModelConfig
    layers: list[LayerWeights]
    embed: np.ndarray       # [vocab, H]
    final_norm: np.ndarray  # [H]
    lm_head: np.ndarray     # [H, vocab]; aliases embed.T when tied

    def validate(self) -> "ModelWeights":
        cfg = self.config.validate()
        h, a, p, v = cfg.hidden_dim, cfg.attn_dim, cfg.mlp_dim, cfg.vocab_size
        if len(self.layers) != cfg.n_layers:
            raise ConfigError(f"n_layers={cfg.n_layers} but model holds {len(self.layers)} layers")
        _expect("embed", self.embed, (v, h))
        _expect("final_norm", self.final_norm, (h,))
        _expect("lm_head", self.lm_head, (h, v))
        for l, lw in enumerate(self.layers):
            _expect(f"layers.{l}.attn.wq", lw.wq, (h, a))
            _expect(f"layers.{l}.attn.wk", lw.wk, (h, a))
            _expect(f"layers.{l}.attn.wv", lw.wv, (h, a))
            _expect(f"layers.{l}.attn.wo", lw.wo, (a, h))
            _expect(f"layers.{l}.attn.norm", lw.attn_norm, (h,))
            _expect(f"layers.{l}.mlp.wu", lw.wu, (h, p))
            _expect(f"layers.{l}.mlp.wd", lw.wd, (p, h))
            _expect(f"layers.{l}.mlp.norm", lw.mlp_norm, (h,))
            if cfg.has_gate:
                if lw.wg is None:
                    raise ConfigError(f"layers.{l}.mlp.wg missing but has_gate=true")
                _expect(f"layers.{l}.mlp.wg", lw.wg, (h, p))
            elif lw.wg is not None:
                raise ConfigError(f"layers.{l}.mlp.wg present but has_gate=false")
        return self


def _expect(name: str, arr: np.ndarray, shape: tuple) -> None:
    if not isinstance(arr, np.ndarray):
        raise ConfigError(f"{name}: expected ndarray, got {type(arr).__name__}")
    if arr.dtype != F32:
        raise ConfigError(f"{name}: expected float32, got {arr.dtype}")
    if arr.shape != shape:
        raise ConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ConfigError(f"{name}: contains non-finite values")


@dataclass
class ForwardTrace:
    logits: np.ndarray                       # [T, vocab]
    act_a: Optional[list[np.ndarray]] = None  # per layer [T, A_n, A_d]
    act_p: Optional[list[np.ndarray]] = None  # per layer [T, P]


def rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return (x / np.sqrt(ms + F32(eps))) * weight


def stable_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation; the exact-erf variant differs by <1e-3 and the
    # toolkit only ever compares a model against itself.
    c = np.sqrt(F32(2.0 / np.pi))
    return F32(0.5) * x * (1.0 + np.tanh(c * (x + F32(0.044715) * x * x * x)))


ACTIVATION_FNS = {
    "silu": silu,
    "relu": lambda x: np.maximum(x, F32(0.0)),
    "gelu": gelu,
}


def rope_tables(head_dim: int, n_pos: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [n_pos, head_dim//2], computed in f64 then cast."""
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(np.arange(n_pos, dtype=np.float64), inv_freq)
    return np.cos(angles).astype(F32), np.sin(angles).astype(F32)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate interleaved pairs within each head. x: [T, A_n, A_d]."""
    even = x[..., 0::2]
    odd = x[..., 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def forward(
    model: ModelWeights,
    token_ids: Sequence[int],
    *,
    collect_attn: bool = False,
    collect_mlp: bool = False,
    consumer: TapConsumer | None = None,
) -> ForwardTrace:
    """Run the model over one token sequence.

    ``collect_attn``/``collect_mlp`` materialize the respective transitional
    activations in the returned trace; ``consumer`` receives both taps for
    every layer as they are produced and nothing is retained for it.
    """
    cfg = model.config
    ids = np.asarray(token_ids)
    if ids.ndim != 1 or ids.size == 0:
        raise ForwardError("token_ids must be a non-empty 1-D sequence")
    if ids.size > cfg.max_seq_len:
        raise ForwardError(f"sequence length {ids.size} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        bad = int(ids[(ids < 0) | (ids >= cfg.vocab_size)][0])
        raise ForwardError(f"token id {bad} out of range for vocab_size {cfg.vocab_size}")

    t = ids.size
    a_n, a_d = cfg.n_heads, cfg.head_dim
    scale = F32(1.0 / np.sqrt(a_d))
    act_fn = ACTIVATION_FNS[cfg.activation]
    cos, sin = rope_tables(a_d, t, cfg.rope_theta)
    causal = np.triu(np.full((t, t), -np.inf, dtype=F32), k=1)

    h = model.embed[ids]
    traced_a: list[np.ndarray] | None = [] if collect_attn else None
    traced_p: list[np.ndarray] | None = [] if collect_mlp else None

    for l, lw in enumerate(model.layers):
        x = rmsnorm(h, lw.attn_norm, cfg.norm_eps)
        q = (x @ lw.wq).reshape(t, a_n, a_d)
        k = (x @ lw.wk).reshape(t, a_n, a_d)
        v = (x @ lw.wv).reshape(t, a_n, a_d)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)

        scores = np.einsum("tnd,snd->nts", q, k) * scale + causal
        probs = stable_softmax(scores, axis=-1)
        act_a = np.einsum("nts,snd->tnd", probs, v)

        h = h + act_a.reshape(t, a_n * a_d) @ lw.wo

        x = rmsnorm(h, lw.mlp_norm, cfg.norm_eps)
        up = x @ lw.wu
        if cfg.has_gate:
            act_p = act_fn(x @ lw.wg) * up
        else:
            act_p = act_fn(up)
        h = h + act_p @ lw.wd

        if not np.isfinite(h).all():
            raise ForwardError(f"non-finite activations after layer {l}")
        if traced_a is not None:
            traced_a.append(act_a)
        if traced_p is not None:
            traced_p.append(act_p)
        if consumer is not None:
            consumer(l, act_a, act_p)

    h = rmsnorm(h, model.final_norm, cfg.norm_eps)
    logits = h @ model.lm_head
    if not np.isfinite(logits).all():
        raise ForwardError("non-finite logits after final projection")
    return ForwardTrace(logits=logits, act_a=traced_a, act_p=traced_p)
