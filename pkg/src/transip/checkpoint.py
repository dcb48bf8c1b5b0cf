"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic            4 bytes  b"TIPC"
    format version   u32      currently 1
    json length      u64
    json block       UTF-8    configuration and run metadata
    record count     u32
    per record:
        path length  u16
        path         UTF-8
        rank         u8
        dims         rank * u64
        values       prod(dims) * float64
    digest           32 bytes sha256 of everything above

Reads validate magic, version, and digest, and report truncation with the
failing byte offset.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .model import ModelConfig, Parameters

MAGIC = b"TIPC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


def write_checkpoint(path: str | Path, config: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(blob)))
    parts.append(blob)
    parts.append(struct.pack("<I", len(arrays)))
    for name, values in arrays.items():
        encoded = name.encode("utf-8")
        data = np.asarray(values, dtype="<f8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(data.tobytes(order="C"))
    body = b"".join(parts)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)


class _Cursor:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: needed {count} bytes at offset {self.pos}, "
                f"file ends at {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 32:
        raise CheckpointError(f"truncated checkpoint: file ends at {len(raw)}")
    body, stored_digest = raw[:-32], raw[-32:]
    cursor = _Cursor(body)

    if cursor.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = cursor.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version} (this build reads {FORMAT_VERSION})"
        )
    (json_len,) = cursor.unpack("<Q")
    try:
        config = json.loads(cursor.take(json_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint json block: {exc}") from None
    (count,) = cursor.unpack("<I")

    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (path_len,) = cursor.unpack("<H")
        try:
            name = cursor.take(path_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"corrupt record path at offset {cursor.pos}: {exc}") from None
        (rank,) = cursor.unpack("<B")
        dims = cursor.unpack(f"<{rank}Q") if rank else ()
        total = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(cursor.take(total * 8), dtype="<f8").reshape(dims).copy()
        arrays[name] = values
    if cursor.pos != len(body):
        raise CheckpointError(f"trailing bytes after records at offset {cursor.pos}")

    if hashlib.sha256(body).digest() != stored_digest:
        raise CheckpointError("digest mismatch: checkpoint corrupted")
    return config, arrays


# -- model-level helpers --------------------------------------------------------

_OPT_M = "optim.m."
_OPT_V = "optim.v."


def config_to_dict(cfg: ModelConfig) -> dict[str, Any]:
    raw = asdict(cfg)
    raw["charge_vocab_range"] = list(raw["charge_vocab_range"])
    raw["spin_vocab_range"] = list(raw["spin_vocab_range"])
    return raw


def config_from_dict(raw: dict[str, Any]) -> ModelConfig:
    raw = dict(raw)
    raw["charge_vocab_range"] = tuple(raw["charge_vocab_range"])
    raw["spin_vocab_range"] = tuple(raw["spin_vocab_range"])
    return ModelConfig(**raw)


def save_model(
    path: str | Path,
    cfg: ModelConfig,
    params: Parameters,
    train_meta: dict[str, Any] | None = None,
    optimizer_moments: tuple[dict[str, np.ndarray], dict[str, np.ndarray]] | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {name: p.data for name, p in params.items()}
    if optimizer_moments is not None:
        m, v = optimizer_moments
        arrays.update({_OPT_M + name: values for name, values in m.items()})
        arrays.update({_OPT_V + name: values for name, values in v.items()})
    config = {"model_config": config_to_dict(cfg)}
    if train_meta:
        config["train_meta"] = train_meta
    write_checkpoint(path, config, arrays)


def load_model(
    path: str | Path,
) -> tuple[
    ModelConfig,
    Parameters,
    dict[str, Any],
    tuple[dict[str, np.ndarray], dict[str, np.ndarray]] | None,
]:
    config, arrays = read_checkpoint(path)
    if "model_config" not in config:
        raise CheckpointError("checkpoint json block lacks model_config")
    cfg = config_from_dict(config["model_config"])
    params: Parameters = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for name, values in arrays.items():
        if name.startswith(_OPT_M):
            m[name[len(_OPT_M) :]] = values
        elif name.startswith(_OPT_V):
            v[name[len(_OPT_V) :]] = values
        else:
            params[name] = T.Tensor(values, requires_grad=True)
    moments = (m, v) if m else None
    return cfg, params, config.get("train_meta", {}), moments
