"""Analytic cost model: parameters, KV cache, and FLOPs from a config alone.

Parameter counts are exact element counts of the stored tensors. The KV
cache is reported in values: two cached vectors of width ``attn_dim`` per
layer per position. FLOPs use the multiply-accumulate = 2 FLOPs convention;
the headline figure counts matmuls only (projections, attention
scores/values, LM head), with softmax/norm/activation work reported as a
separate documented secondary term. Embedding lookups count zero FLOPs.

Per token, per layer, at attention span ``ctx``:

    matmul    2*(3*H*A + A*H) + 2*(2*H*P + P*H)     (gated MLP; 2*(H*P + P*H) ungated)
    attention 4*A*ctx                                (scores q.k and values p.v)

plus ``2*H*vocab`` per token for the LM head. Prefill sums the per-token
cost over all positions with span fixed at ``ctx``; decode evaluates one
token at its span.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import ModelConfig

# Secondary (non-matmul) per-token FLOP estimates, documented constants:
# softmax ~5 FLOPs per score (max-subtract, exp, sum, divide), RMS norm ~4
# per element over three norms' inputs, activation+gating ~6 per MLP channel.
_SOFTMAX_FLOPS_PER_SCORE = 5
_NORM_FLOPS_PER_ELEM = 4
_ACT_FLOPS_PER_CHANNEL = 6


@dataclass(frozen=True)
class ParamCounts:
    total: int
    mha_per_layer: int
    mlp_per_layer: int
    embed: int
    lm_head: int
    norms: int


def count_params(cfg: ModelConfig) -> ParamCounts:
    cfg.validate()
    h, a, p = cfg.hidden_dim, cfg.attn_dim, cfg.mlp_dim
    mha = 3 * h * a + a * h
    mlp = (2 * h * p + p * h) if cfg.has_gate else (h * p + p * h)
    embed = cfg.vocab_size * h
    lm_head = 0 if cfg.tied_lm_head else cfg.vocab_size * h
    norms = cfg.n_layers * 2 * h + h
    total = cfg.n_layers * (mha + mlp) + embed + lm_head + norms
    return ParamCounts(total=total, mha_per_layer=mha, mlp_per_layer=mlp, embed=embed, lm_head=lm_head, norms=norms)


def kv_cache_values(cfg: ModelConfig, seq_len: int) -> int:
    """Cached key+value scalars: 2 * layers * attn_dim * seq_len."""
    if seq_len < 0:
        raise ValueError(f"seq_len must be non-negative, got {seq_len}")
    return 2 * cfg.n_layers * cfg.attn_dim * seq_len

def kv_cache_bytes(cfg: ModelConfig, seq_len: int, bytes_per_value: int = 2) -> int:
    return kv_cache_values(cfg, seq_len) * bytes_per_value


@dataclass(frozen=True)
class FlopsEstimate:
    ctx_len: int
    n_generated: int
    matmul_per_token: int      # dense projections + LM head, span-independent
    attn_per_token: int        # score/value matmuls at span = ctx_len
    secondary_per_token: int   # softmax/norm/activation estimate at span = ctx_len
    prefill: int               # headline matmul FLOPs over ctx_len positions
    decode_per_token: int      # headline matmul FLOPs for one token at span = ctx_len
    total: int                 # prefill + generated tokens at growing span


def _dense_per_token(cfg: ModelConfig) -> int:
    h, a, p = cfg.hidden_dim, cfg.attn_dim, cfg.mlp_dim
    mlp = 2 * (2 * h * p + p * h) if cfg.has_gate else 2 * (h * p + p * h)
    per_layer = 2 * (3 * h * a + a * h) + mlp
    return cfg.n_layers * per_layer + 2 * h * cfg.vocab_size


def _attn_per_token(cfg: ModelConfig, span: int) -> int:
    return cfg.n_layers * 4 * cfg.attn_dim * span


def _secondary_per_token(cfg: ModelConfig, span: int) -> int:
    softmax = cfg.n_layers * _SOFTMAX_FLOPS_PER_SCORE * cfg.n_heads * span
    norms = (cfg.n_layers * 2 + 1) * _NORM_FLOPS_PER_ELEM * cfg.hidden_dim
    act = cfg.n_layers * _ACT_FLOPS_PER_CHANNEL * cfg.mlp_dim
    return softmax + norms + act


def flops_estimate(cfg: ModelConfig, ctx_len: int, n_generated: int = 1) -> FlopsEstimate:
    cfg.validate()
    if ctx_len < 1:
        raise ValueError(f"ctx_len must be positive, got {ctx_len}")
    if n_generated < 0:
        raise ValueError(f"n_generated must be non-negative, got {n_generated}")
    dense = _dense_per_token(cfg)
    attn = _attn_per_token(cfg, ctx_len)
    per_token = dense + attn
    prefill = ctx_len * per_token
    decode = per_token
    total = prefill + sum(dense + _attn_per_token(cfg, ctx_len + g) for g in range(1, n_generated + 1))
    return FlopsEstimate(
        ctx_len=ctx_len,
        n_generated=n_generated,
        matmul_per_token=dense,
        attn_per_token=attn,
        secondary_per_token=_secondary_per_token(cfg, ctx_len),
        prefill=prefill,
        decode_per_token=decode,
        total=total,
    )


@dataclass
class CostReport:
    name: str
    config: ModelConfig
    params: ParamCounts
    seq_len: int
    kv_values: int
    kv_bytes: int
    flops: list[FlopsEstimate]
    # Percent reductions vs. the reference config; None without a reference.
    params_reduction_pct: float | None = None
    kv_reduction_pct: float | None = None
    flops_reduction_pct: dict[int, float] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        """One flat dict per context length, ready for CSV."""
        out = []
        for est in self.flops:
            out.append(
                {
                    "name": self.name,
                    "n_layers": self.config.n_layers,
                    "hidden_dim": self.config.hidden_dim,
                    "attn_dim": self.config.attn_dim,
                    "mlp_dim": self.config.mlp_dim,
                    "params_total": self.params.total,
                    "params_mha_per_layer": self.params.mha_per_layer,
                    "params_mlp_per_layer": self.params.mlp_per_layer,
                    "params_embed": self.params.embed,
                    "seq_len": self.seq_len,
                    "kv_values": self.kv_values,
                    "kv_bytes": self.kv_bytes,
                    "ctx_len": est.ctx_len,
                    "flops_prefill": est.prefill,
                    "flops_decode_per_token": est.decode_per_token,
                    "flops_secondary_per_token": est.secondary_per_token,
                    "params_reduction_pct": _fmt(self.params_reduction_pct),
                    "kv_reduction_pct": _fmt(self.kv_reduction_pct),
                    "flops_reduction_pct": _fmt(self.flops_reduction_pct.get(est.ctx_len)),
                }
            )
        return out


def _fmt(x: float | None):
    return "" if x is None else round(x, 4)


def build_cost_report(
    cfg: ModelConfig,
    seq_len: int,
    ctx_lens: list[int],
    ref_cfg: ModelConfig | None = None,
    name: str = "model",
) -> CostReport:
    report = CostReport(
        name=name,
        config=cfg,
        params=count_params(cfg),
        seq_len=seq_len,
        kv_values=kv_cache_values(cfg, seq_len),
        kv_bytes=kv_cache_bytes(cfg, seq_len),
        flops=[flops_estimate(cfg, c) for c in ctx_lens],
    )
    if ref_cfg is not None:
        ref_params = count_params(ref_cfg).total
        ref_kv = kv_cache_values(ref_cfg, seq_len)
        report.params_reduction_pct = 100.0 * (1.0 - report.params.total / ref_params)
        report.kv_reduction_pct = 100.0 * (1.0 - report.kv_values / ref_kv)
        for est in report.flops:
            ref_est = flops_estimate(ref_cfg, est.ctx_len)
            report.flops_reduction_pct[est.ctx_len] = 100.0 * (1.0 - est.decode_per_token / ref_est.decode_per_token)
    return report


def reduction_pct_display(value: int, reference: int) -> int:
    """Integer percent reduction as displayed in comparison tables."""
    return round(100 * (1 - value / reference))


@dataclass(frozen=True)
class GridPoint:
    config: ModelConfig
    params: ParamCounts
    group: int  # equal-exact-parameter group id, ascending by size


def sweep_grid(base_cfg: ModelConfig, attn_dims: list[int], mlp_dims: list[int]) -> list[GridPoint]:
    """Cost grid over attention width x MLP width combinations.

    Points with identical exact parameter totals share a group id, matching
    the equal-parameter bucketing used to compare redundancy trade-offs.
    Attention widths must be multiples of the base head width.
    """
    points = []
    for a in attn_dims:
        if a % base_cfg.head_dim != 0:
            raise ValueError(f"attn dim {a} is not a multiple of head_dim {base_cfg.head_dim}")
        for p in mlp_dims:
            cfg = base_cfg.with_dims(n_heads=a // base_cfg.head_dim, mlp_dim=p)
            points.append((cfg, count_params(cfg)))
    totals = sorted({pc.total for _, pc in points})
    group_of = {t: i for i, t in enumerate(totals)}
    return [GridPoint(config=cfg, params=pc, group=group_of[pc.total]) for cfg, pc in points]
