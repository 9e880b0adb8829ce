"""Architecture description for decoder-only transformer models.

A model is fully described by its layer count, residual width H, attention
shape (head count x head width), MLP transitional width, vocabulary, and a
few scalar knobs. The residual width H is never pruned; attention is pruned
in whole heads and the MLP in single transitional channels, so the config of
a pruned model differs from its source only in ``n_heads`` and ``mlp_dim``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, fields, replace
from pathlib import Path

from .errors import ConfigError

ACTIVATIONS = ("silu", "relu", "gelu")

# Sanity ceiling for any single dimension; rejects absurd/corrupt configs.
MAX_DIM = 1 << 20


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    hidden_dim: int
    n_heads: int
    head_dim: int
    mlp_dim: int
    vocab_size: int
    has_gate: bool = True
    activation: str = "silu"
    norm_eps: float = 1e-5
    rope_theta: float = 10000.0
    max_seq_len: int = 4096
    tied_lm_head: bool = False

    @property
    def attn_dim(self) -> int:
        """Total attention width A = n_heads * head_dim."""
        return self.n_heads * self.head_dim

    def validate(self) -> "ModelConfig":
        # n_layers may be zero: a degenerate embedding-only model is legal
        # for cost accounting and even forwards (embed -> norm -> head).
        if not isinstance(self.n_layers, int) or self.n_layers < 0:
            raise ConfigError(f"n_layers must be a non-negative integer, got {self.n_layers!r}")
        for name in ("hidden_dim", "n_heads", "head_dim", "mlp_dim", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
            if value > MAX_DIM:
                raise ConfigError(f"{name}={value} exceeds the supported bound {MAX_DIM}")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary embedding, got {self.head_dim}")
        if self.attn_dim > MAX_DIM:
            raise ConfigError(f"n_heads*head_dim={self.attn_dim} exceeds the supported bound {MAX_DIM}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not (self.norm_eps > 0):
            raise ConfigError(f"norm_eps must be positive, got {self.norm_eps!r}")
        if not (self.rope_theta > 0):
            raise ConfigError(f"rope_theta must be positive, got {self.rope_theta!r}")
        if not isinstance(self.has_gate, bool):
            raise ConfigError(f"has_gate must be a boolean, got {self.has_gate!r}")
        if not isinstance(self.tied_lm_head, bool):
            raise ConfigError(f"tied_lm_head must be a boolean, got {self.tied_lm_head!r}")
        return self

    def with_dims(self, n_heads: int | None = None, mlp_dim: int | None = None) -> "ModelConfig":
        """Copy of this config with a pruned attention/MLP shape."""
        out = replace(
            self,
            n_heads=self.n_heads if n_heads is None else n_heads,
            mlp_dim=self.mlp_dim if mlp_dim is None else mlp_dim,
        )
        return out.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(f"incomplete config: {exc}") from exc
        return cfg.validate()


def load_config_json(path: str | Path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config JSON must be an object")
    return ModelConfig.from_dict(data)


def save_config_json(cfg: ModelConfig, path: str | Path) -> None:
    cfg.validate()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
