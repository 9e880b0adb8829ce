"""Binary tensor container for models and calibration statistics.

Layout (all integers little-endian):

    bytes 0..8    magic ``TACTMDL1``
    bytes 8..16   u64 header length
    then          UTF-8 JSON header, space-padded so the payload region
                  starts 64-byte aligned
    then          raw row-major tensor payloads

Header schema::

    {"kind": "model"|"config"|"stats",
     "config": {...ModelConfig fields...},
     "meta": {...},
     "tensors": {name: {"dtype": "f32"|"f64", "shape": [...], "offset": N}}}

Offsets are relative to the payload region start and every tensor offset is a
multiple of 64, so payloads are 64-byte aligned in the file as well. Model
tensors are always ``f32``; statistics accumulators are stored as ``f64``.

Model tensor names: ``embed``, ``lm_head``, ``final_norm``,
``layers.{l}.attn.{wq|wk|wv|wo|norm}``, ``layers.{l}.mlp.{wg|wu|wd|norm}``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import ContainerError
from .model import LayerWeights, ModelWeights

MAGIC = b"TACTMDL1"
ALIGN = 64
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


@dataclass
class Container:
    kind: str
    config: ModelConfig
    meta: dict
    tensors: dict[str, np.ndarray]


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write_container(
    path: str | Path,
    kind: str,
    config: ModelConfig,
    tensors: dict[str, np.ndarray],
    meta: dict | None = None,
) -> None:
    directory = {}
    offset = 0
    for name, arr in tensors.items():
        dtype_name = _DTYPE_NAMES.get(arr.dtype)
        if dtype_name is None:
            raise ContainerError(f"{name}: unsupported dtype {arr.dtype}")
        offset = _align(offset)
        directory[name] = {"dtype": dtype_name, "shape": list(arr.shape), "offset": offset}
        offset += arr.nbytes

    header = {
        "kind": kind,
        "config": config.to_dict(),
        "meta": meta or {},
        "tensors": directory,
    }
    raw = json.dumps(header).encode("utf-8")
    # Pad the header so the payload region starts 64-byte aligned.
    header_len = _align(len(MAGIC) + 8 + len(raw)) - len(MAGIC) - 8
    raw = raw + b" " * (header_len - len(raw))

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint64(header_len).tobytes())
        fh.write(raw)
        payload_start = fh.tell()
        for name, arr in tensors.items():
            target = payload_start + directory[name]["offset"]
            fh.write(b"\0" * (target - fh.tell()))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_container(path: str | Path) -> Container:
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    header_len = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    if 16 + header_len > len(blob):
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: malformed header JSON: {exc}") from exc

    config = ModelConfig.from_dict(header["config"])
    payload_start = 16 + header_len
    tensors = {}
    for name, entry in header.get("tensors", {}).items():
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ContainerError(f"{path}: tensor {name} has unknown dtype {entry['dtype']!r}")
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        if offset < 0 or offset % ALIGN != 0:
            raise ContainerError(f"{path}: tensor {name} has misaligned offset {offset}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        start = payload_start + offset
        if start + nbytes > len(blob):
            raise ContainerError(f"{path}: truncated payload for tensor {name}")
        arr = np.frombuffer(blob[start : start + nbytes], dtype=dtype).reshape(shape)
        native = np.float32 if entry["dtype"] == "f32" else np.float64
        tensors[name] = arr.astype(native)  # owned, writable, native-endian copy
    return Container(kind=header.get("kind", "model"), config=config, meta=header.get("meta", {}), tensors=tensors)


def _model_tensor_names(cfg: ModelConfig) -> list[str]:
    # a tied LM head is not stored; it is rebuilt from the embedding on load
    names = ["embed", "final_norm"] if cfg.tied_lm_head else ["embed", "lm_head", "final_norm"]
    for l in range(cfg.n_layers):
        names += [f"layers.{l}.attn.{w}" for w in ("wq", "wk", "wv", "wo", "norm")]
        names += [f"layers.{l}.mlp.{w}" for w in (("wg", "wu", "wd", "norm") if cfg.has_gate else ("wu", "wd", "norm"))]
    return names


def model_tensors(model: ModelWeights) -> dict[str, np.ndarray]:
    out = {"embed": model.embed, "final_norm": model.final_norm}
    if model.config.tied_lm_head:
        if not np.array_equal(model.lm_head, model.embed.T):
            raise ContainerError("tied_lm_head=true but lm_head does not equal embed.T")
    else:
        out["lm_head"] = model.lm_head
    for l, lw in enumerate(model.layers):
        out[f"layers.{l}.attn.wq"] = lw.wq
        out[f"layers.{l}.attn.wk"] = lw.wk
        out[f"layers.{l}.attn.wv"] = lw.wv
        out[f"layers.{l}.attn.wo"] = lw.wo
        out[f"layers.{l}.attn.norm"] = lw.attn_norm
        if lw.wg is not None:
            out[f"layers.{l}.mlp.wg"] = lw.wg
        out[f"layers.{l}.mlp.wu"] = lw.wu
        out[f"layers.{l}.mlp.wd"] = lw.wd
        out[f"layers.{l}.mlp.norm"] = lw.mlp_norm
    return out


def save_model(model: ModelWeights, path: str | Path) -> None:
    model.validate()
    write_container(path, "model", model.config, model_tensors(model))


def save_config(cfg: ModelConfig, path: str | Path) -> None:
    """Config-only container: usable for cost accounting, rejected by load_model."""
    write_container(path, "config", cfg.validate(), {})


def load_config(path: str | Path) -> ModelConfig:
    return read_container(path).config


def load_model(path: str | Path) -> ModelWeights:
    box = read_container(path)
    cfg = box.config
    for name in _model_tensor_names(cfg):
        if name not in box.tensors:
            raise ContainerError(f"{path}: missing tensor {name}")
    t = box.tensors
    layers = [
        LayerWeights(
            wq=t[f"layers.{l}.attn.wq"],
            wk=t[f"layers.{l}.attn.wk"],
            wv=t[f"layers.{l}.attn.wv"],
            wo=t[f"layers.{l}.attn.wo"],
            attn_norm=t[f"layers.{l}.attn.norm"],
            wg=t.get(f"layers.{l}.mlp.wg"),
            wu=t[f"layers.{l}.mlp.wu"],
            wd=t[f"layers.{l}.mlp.wd"],
            mlp_norm=t[f"layers.{l}.mlp.norm"],
        )
        for l in range(cfg.n_layers)
    ]
    lm_head = np.ascontiguousarray(t["embed"].T) if cfg.tied_lm_head else t["lm_head"]
    model = ModelWeights(config=cfg, layers=layers, embed=t["embed"], final_norm=t["final_norm"], lm_head=lm_head)
    return model.validate()


def tensor_element_count(path: str | Path) -> int:
    """Total number of stored tensor elements (cross-check for count_params)."""
    box = read_container(path)
    return int(sum(arr.size for arr in box.tensors.values()))


def model_fingerprint(model: ModelWeights) -> str:
    """Deterministic identity hash over config and raw weight bytes."""
    digest = hashlib.sha256()
    digest.update(json.dumps(model.config.to_dict(), sort_keys=True).encode())
    for name, arr in model_tensors(model).items():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()
