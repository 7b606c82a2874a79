"""Dataset files: JSONL records and the RGNF region-feature format.

RGNF block (little-endian)::

    b"RGNF"  u32 K  u32 d_in  K*d_in float32, row-major

A dataset's ``features.rgnf`` holds one block per study back to back. Each
region record in ``regions.jsonl`` points at its feature row with
``feature_file_offset``: the absolute byte offset of that row.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import DatasetSplit
from .graph_builder import AnatomicalRegion, AnatomyGraph, build_graph
from .label_extractor import SoftLabelVector

RGNF_MAGIC = b"RGNF"
_HEADER = struct.Struct("<4sII")


class FeatureFileError(ValueError):
    pass


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
    return out


def write_jsonl(path, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=False) + "\n")
            n += 1
    return n


def encode_rgnf(features: np.ndarray) -> bytes:
    features = np.asarray(features, dtype="<f4")
    k, d = features.shape
    return _HEADER.pack(RGNF_MAGIC, k, d) + features.tobytes(order="C")


def decode_rgnf(data: bytes, offset: int = 0) -> np.ndarray:
    magic, k, d = _HEADER.unpack_from(data, offset)
    if magic != RGNF_MAGIC:
        raise FeatureFileError(f"bad magic {magic!r} at offset {offset}")
    start = offset + _HEADER.size
    return np.frombuffer(data, dtype="<f4", count=k * d, offset=start).reshape(k, d).copy()


def write_feature_file(path, blocks: Sequence[np.ndarray]) -> list[list[int]]:
    """Write one RGNF block per study; return per-study row byte offsets."""
    offsets = []
    pos = 0
    with open(path, "wb") as fh:
        for block in blocks:
            data = encode_rgnf(block)
            k, d = np.asarray(block).shape
            offsets.append([pos + _HEADER.size + i * d * 4 for i in range(k)])
            fh.write(data)
            pos += len(data)
    return offsets


def feature_dim(data: bytes) -> int:
    if len(data) < _HEADER.size:
        raise FeatureFileError("feature file is truncated")
    magic, _, d = _HEADER.unpack_from(data, 0)
    if magic != RGNF_MAGIC:
        raise FeatureFileError(f"bad magic {magic!r}")
    return d


def read_rows(data: bytes, offsets: Sequence[int], d: int) -> np.ndarray:
    rows = []
    for off in offsets:
        if off < 0 or off + 4 * d > len(data):
            raise FeatureFileError(f"feature offset {off} outside file")
        rows.append(np.frombuffer(data, dtype="<f4", count=d, offset=off))
    return np.array(rows, dtype=float)


def load_labels(path) -> list[SoftLabelVector]:
    return [SoftLabelVector.from_record(r) for r in read_jsonl(path)]


def load_regions(path) -> dict[str, list[AnatomicalRegion]]:
    """Read regions.jsonl and the feature file(s) it references."""
    path = Path(path)
    cache: dict[Path, bytes] = {}
    out = {}
    for rec in read_jsonl(path):
        fpath = path.parent / rec.get("feature_file", "features.rgnf")
        if fpath not in cache:
            cache[fpath] = fpath.read_bytes()
        data = cache[fpath]
        d = feature_dim(data)
        regs = rec["regions"]
        feats = read_rows(data, [r["feature_file_offset"] for r in regs], d)
        out[str(rec["study_id"])] = [
            AnatomicalRegion(r["name"], tuple(float(v) for v in r["bbox"]), f) for r, f in zip(regs, feats)
        ]
    return out


@dataclass
class Dataset:
    study_ids: list[str]
    labels: np.ndarray  # (n, 18) soft labels
    regions: dict[str, list[AnatomicalRegion]]
    split: DatasetSplit | None

    def graphs(self, ids: Sequence[str], tau: float, semantic: np.ndarray) -> list[AnatomyGraph]:
        return [build_graph(self.regions[s], tau, semantic, study_id=s) for s in ids]

    def label_rows(self, ids: Sequence[str]) -> np.ndarray:
        pos = {s: i for i, s in enumerate(self.study_ids)}
        return self.labels[[pos[s] for s in ids]]

    def part(self, name: str) -> list[str]:
        if self.split is None:
            raise ValueError("dataset has no split.json")
        return list(getattr(self.split, name))


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    vecs = load_labels(directory / "labels.jsonl")
    regions = load_regions(directory / "regions.jsonl")
    split_path = directory / "split.json"
    split = DatasetSplit.load(split_path) if split_path.exists() else None
    missing = [v.study_id for v in vecs if v.study_id not in regions]
    if missing:
        raise ValueError(f"{len(missing)} labelled studies have no regions, e.g. {missing[0]!r}")
    return Dataset(
        study_ids=[v.study_id for v in vecs],
        labels=np.stack([v.probabilities() for v in vecs]),
        regions=regions,
        split=split,
    )
