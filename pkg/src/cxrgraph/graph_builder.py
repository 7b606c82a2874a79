"""Multi-relationship anatomy graphs: spatial, semantic and implicit edges."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .rules import DISEASES

REGIONS = (
    "Right lung",
    "Right upper lung",
    "Right mid lung",
    "Right lower lung",
    "Hilar of right lung",
    "Apical of right lung",
    "Right costophrenic sulcus",
    "Right hemidiaphragm",
    "Left lung",
    "Left upper lung",
    "Left mid lung",
    "Left lower lung",
    "Hilar of left lung",
    "Apical of left lung",
    "Left costophrenic sulcus",
    "Left hemidiaphragm",
    "Cardiac",
    "Cavoatrial",
    "Descending aorta",
    "Structure of carina",
    "Main Bronchus",
    "Right clavicle",
    "Left clavicle",
    "Mediastinum",
    "Aortic arch structure",
    "Superior vena cava structure",
)
N_REGIONS = len(REGIONS)
RELATIONS = ("sp", "se", "im")
DEFAULT_TAU = 0.5
EDGE_FEATURE_DIM = 4


class DegenerateBoxError(ValueError):
    pass


class KnowledgeGraphError(ValueError):
    pass


@dataclass(frozen=True)
class AnatomicalRegion:
    name: str
    bbox: tuple[float, float, float, float]  # x, y, w, h
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        return x + w / 2, y + h / 2

    @property
    def location_code(self) -> tuple[float, float, float, float]:
        cx, cy = self.center
        return cx, cy, self.bbox[3], self.bbox[2]


@dataclass
class AnatomyGraph:
    nodes: list[AnatomicalRegion]
    region_index: np.ndarray  # (K,) slot of each node in REGIONS (or a custom layout)
    adjacency_spatial: np.ndarray
    adjacency_semantic: np.ndarray
    adjacency_implicit: np.ndarray
    edge_features: np.ndarray  # (K, K, 4): [cx_i, cy_i, cx_j, cy_j]
    study_id: str = ""

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def features(self) -> np.ndarray:
        return np.stack([n.feature for n in self.nodes])

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def adjacency(self, relation: str) -> np.ndarray:
        return {
            "sp": self.adjacency_spatial,
            "se": self.adjacency_semantic,
            "im": self.adjacency_implicit,
        }[relation]

    def dependency(self, relation: str) -> np.ndarray:
        """Initial dependency e_ij: the relation's adjacency value."""
        return self.adjacency(relation).copy()


@dataclass(frozen=True)
class KnowledgeGraphConfig:
    anatomy_disease_edges: tuple[tuple[str, str], ...]
    disease_cooccurrence_edges: tuple[tuple[str, str], ...]

    def validate(self) -> "KnowledgeGraphConfig":
        for region, disease in self.anatomy_disease_edges:
            if region not in REGIONS:
                raise KnowledgeGraphError(f"unknown region {region!r}")
            if disease not in DISEASES:
                raise KnowledgeGraphError(f"unknown disease {disease!r}")
        for a, b in self.disease_cooccurrence_edges:
            for d in (a, b):
                if d not in DISEASES:
                    raise KnowledgeGraphError(f"unknown disease {d!r}")
        return self


def _data_path(name: str) -> Path:
    return Path(str(resources.files("cxrgraph") / "data" / name))


def load_knowledge_graph(path=None) -> KnowledgeGraphConfig:
    path = Path(path) if path is not None else _data_path("knowledge_graph.yaml")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise KnowledgeGraphError(f"{path}: malformed YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise KnowledgeGraphError(f"{path}: top level must be a mapping")
    pairs = []
    for disease, regions in (doc.get("anatomy_disease") or {}).items():
        pairs.extend((r, disease) for r in regions)
    co = [tuple(p) for p in doc.get("cooccurrence") or []]
    if any(len(p) != 2 for p in co):
        raise KnowledgeGraphError(f"{path}: co-occurrence entries must be pairs")
    return KnowledgeGraphConfig(tuple(pairs), tuple(co)).validate()


def load_layout(path=None) -> dict[str, tuple[float, float, float, float]]:
    path = Path(path) if path is not None else _data_path("layout.yaml")
    doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    return {name: tuple(float(v) for v in doc[name]) for name in REGIONS}


def _check_box(box) -> None:
    if box[2] <= 0 or box[3] <= 0:
        raise DegenerateBoxError(f"box {tuple(box)} has non-positive width or height")


def iou(a, b) -> float:
    """Intersection over union of two ``(x, y, w, h)`` boxes."""
    _check_box(a)
    _check_box(b)
    iw = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    ih = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def iou_matrix(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    if np.any(boxes[:, 2:] <= 0):
        raise DegenerateBoxError("boxes must have positive width and height")
    x0, y0 = boxes[:, 0], boxes[:, 1]
    x1, y1 = x0 + boxes[:, 2], y0 + boxes[:, 3]
    iw = np.clip(np.minimum(x1[:, None], x1[None]) - np.maximum(x0[:, None], x0[None]), 0, None)
    ih = np.clip(np.minimum(y1[:, None], y1[None]) - np.maximum(y0[:, None], y0[None]), 0, None)
    inter = iw * ih
    area = boxes[:, 2] * boxes[:, 3]
    return inter / (area[:, None] + area[None] - inter)


def build_spatial(nodes: Sequence[AnatomicalRegion], tau: float = DEFAULT_TAU) -> np.ndarray:
    """Binary adjacency: 1 where IOU(i, j) >= tau, zero diagonal."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    m = iou_matrix(np.array([n.bbox for n in nodes]))
    adj = (m >= tau).astype(float)
    adj = np.maximum(adj, adj.T)
    np.fill_diagonal(adj, 0.0)
    return adj


def build_implicit(k: int) -> np.ndarray:
    return np.ones((k, k)) - np.eye(k)


def region_diseases(kg: KnowledgeGraphConfig) -> dict[str, set[str]]:
    out = {r: set() for r in REGIONS}
    for region, disease in kg.anatomy_disease_edges:
        out[region].add(disease)
    return out


def build_semantic_phase1(kg: KnowledgeGraphConfig, regions: Sequence[str] = REGIONS) -> np.ndarray:
    """Connect regions sharing a disease or carrying co-occurring diseases."""
    kg.validate()
    for r in regions:
        if r not in REGIONS:
            raise KnowledgeGraphError(f"unknown region {r!r}")
    rd = region_diseases(kg)
    co = {frozenset(p) for p in kg.disease_cooccurrence_edges}
    k = len(regions)
    adj = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            di, dj = rd[regions[i]], rd[regions[j]]
            linked = bool(di & dj) or any(frozenset((a, b)) in co for a in di for b in dj)
            adj[i, j] = adj[j, i] = float(linked)
    return adj


def build_semantic_phase2(top1, top2, co, threshold: float = 0.0) -> np.ndarray:
    """Average of the top-1 and top-2 disease relation matrices.

    ``top1``/``top2`` hold a class index per node; ``co`` is a disease
    co-occurrence count matrix (or ``CooccurrenceMatrix``). Two nodes are
    related when their diseases are equal or co-occur more than ``threshold``.
    """
    counts = np.asarray(getattr(co, "counts", co))
    top1, top2 = np.asarray(top1), np.asarray(top2)

    def relation(top):
        a = (top[:, None] == top[None]) | (counts[top[:, None], top[None]] > threshold)
        a = a.astype(float)
        np.fill_diagonal(a, 0.0)
        return a

    return (relation(top1) + relation(top2)) / 2


def edge_feature_tensor(nodes: Sequence[AnatomicalRegion]) -> np.ndarray:
    centers = np.array([n.center for n in nodes], dtype=float)
    k = len(nodes)
    out = np.empty((k, k, EDGE_FEATURE_DIM))
    out[:, :, :2] = centers[:, None, :]
    out[:, :, 2:] = centers[None, :, :]
    return out


def build_graph(
    nodes: Sequence[AnatomicalRegion],
    tau: float = DEFAULT_TAU,
    semantic: np.ndarray | None = None,
    study_id: str = "",
    region_index=None,
) -> AnatomyGraph:
    """Assemble the three adjacencies and initial edge features.

    ``semantic`` may be K x K (already restricted to ``nodes``) or
    N x N over the full region list, in which case rows/columns of the
    present regions are taken. ``region_index`` defaults to each node's
    position in ``REGIONS``.
    """
    nodes = list(nodes)
    k = len(nodes)
    if k < 1:
        raise ValueError("a graph needs at least one node")
    if region_index is None:
        region_index = np.array([REGIONS.index(n.name) for n in nodes])
    region_index = np.asarray(region_index, dtype=int)
    if semantic is None:
        semantic = np.zeros((k, k))
    semantic = np.asarray(semantic, dtype=float)
    if semantic.shape != (k, k):
        semantic = semantic[np.ix_(region_index, region_index)]
    semantic = semantic.copy()
    np.fill_diagonal(semantic, 0.0)
    dims = {n.feature.shape for n in nodes}
    if len(dims) > 1:
        raise ValueError(f"node features have differing shapes {sorted(dims)}")
    return AnatomyGraph(
        nodes=nodes,
        region_index=region_index,
        adjacency_spatial=build_spatial(nodes, tau),
        adjacency_semantic=semantic,
        adjacency_implicit=build_implicit(k),
        edge_features=edge_feature_tensor(nodes),
        study_id=study_id,
    )
