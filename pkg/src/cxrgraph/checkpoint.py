"""Binary model checkpoints.

Layout (little-endian)::

    b"MRGC"  u32 version
    u32 d_in  u32 n_classes  u32 n_slots  u32 n_layers  u32 hidden_dim
    u32 edge_dim  u32 head_hidden (0 = linear head)  u32 aggregation (0 sum, 1 mean)
    f64 alpha  f64 beta
    f64 parameters, each tensor flattened row-major, in declared order

Parameter shapes are not stored; they follow from the header dimensions.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .network import Architecture

MAGIC = b"MRGC"
VERSION = 1
_HEADER = struct.Struct("<4sI8Idd")
_AGGREGATIONS = ("sum", "mean")


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: dict[str, np.ndarray], arch: Architecture, alpha: float, beta: float) -> bytes:
    shapes = arch.param_shapes()
    if set(params) != set(shapes):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise CheckpointError(f"parameters do not match architecture (missing {missing}, extra {extra})")
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        arch.d_in,
        arch.n_classes,
        arch.n_slots,
        arch.n_layers,
        arch.hidden_dim,
        arch.edge_dim,
        arch.head_hidden or 0,
        _AGGREGATIONS.index(arch.aggregation),
        float(alpha),
        float(beta),
    )
    chunks = [header]
    for name, shape in shapes.items():
        value = np.asarray(params[name], dtype="<f8")
        if value.shape != shape:
            raise CheckpointError(f"{name}: shape {value.shape}, expected {shape}")
        chunks.append(value.tobytes(order="C"))
    return b"".join(chunks)


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], Architecture, float, float]:
    if len(data) < _HEADER.size:
        raise CheckpointError("checkpoint is truncated")
    magic, version, d_in, n_classes, n_slots, n_layers, hidden, edge, head, agg, alpha, beta = _HEADER.unpack_from(
        data
    )
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if agg >= len(_AGGREGATIONS):
        raise CheckpointError(f"unknown aggregation code {agg}")
    arch = Architecture(
        d_in=d_in,
        n_classes=n_classes,
        n_slots=n_slots,
        n_layers=n_layers,
        hidden_dim=hidden,
        edge_dim=edge,
        head_hidden=head or None,
        aggregation=_AGGREGATIONS[agg],
    )
    shapes = arch.param_shapes()
    expected = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(data) != expected:
        raise CheckpointError(f"checkpoint has {len(data)} bytes, expected {expected}")
    params = {}
    pos = _HEADER.size
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(float)
        pos += 8 * count
    return params, arch, alpha, beta


def save_checkpoint(path, params, arch: Architecture, alpha: float, beta: float) -> None:
    Path(path).write_bytes(encode_checkpoint(params, arch, alpha, beta))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
