"""Gradient-times-feature attribution over graph nodes and edges.

For class ``c`` and relation ``r`` the node score is
``sum_d (d target / d F_r^L) * F_r^L`` and the edge score is the same
product over the edge features consumed by the last convolution. The
target is the fused probability by default, or each relation head's
logit (``target="logit"``), which makes the scores an exact additive
decomposition of the logit for a depth-0 model.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from .graph_builder import RELATIONS, AnatomyGraph
from .network import Architecture, GraphBatch, Prediction, backward, forward, stack_graphs
from .rules import DISEASES

TARGETS = ("probability", "logit")
THETA_EDGE = 0.5
THETA_NODE = 0.5


class DegenerateAttributionWarning(UserWarning):
    """All attributions at a node are zero; top diseases fall back to class order."""


def normalize(scores) -> np.ndarray:
    """``|s| / max|s|``; all zeros stay zero."""
    s = np.abs(np.asarray(scores, dtype=float))
    m = s.max(initial=0.0)
    return s / m if m > 0 else np.zeros_like(s)


def top_node(scores) -> np.ndarray:
    """Index of the largest positive score along the last axis, or of the
    largest magnitude where no score is positive."""
    s = np.asarray(scores, dtype=float)
    return np.where(s.max(axis=-1) > 0, np.argmax(s, axis=-1), np.argmax(np.abs(s), axis=-1))


@dataclass
class BatchAttribution:
    node: dict[str, np.ndarray]  # relation -> (B, N)
    edge: dict[str, np.ndarray]  # relation -> (B, N, N)

    @property
    def node_total(self) -> np.ndarray:
        return sum(self.node[r] for r in RELATIONS)


def _check_class(class_id: int, n_classes: int) -> int:
    if not isinstance(class_id, (int, np.integer)) or not 0 <= class_id < n_classes:
        raise ValueError(f"class_id must be an integer in [0, {n_classes}), got {class_id!r}")
    return int(class_id)


def attribute_batch(
    params,
    arch: Architecture,
    batch: GraphBatch,
    class_id: int,
    alpha: float = 0.3,
    beta: float = 0.4,
    target: str = "probability",
    pred: Prediction | None = None,
) -> BatchAttribution:
    """Node and edge scores for every graph of a padded batch."""
    class_id = _check_class(class_id, arch.n_classes)
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}, got {target!r}")
    if pred is None:
        pred = forward(params, batch, arch, alpha, beta)
    onehot = np.zeros((len(batch), arch.n_classes))
    onehot[:, class_id] = 1.0
    if target == "probability":
        _, act = backward(params, pred, grad_fused=onehot)
    else:
        _, act = backward(params, pred, grad_logits={r: onehot for r in RELATIONS})
    node, edge = {}, {}
    for r in RELATIONS:
        node[r] = np.sum(act.node[r] * pred.node_features[r], axis=-1)
        if act.edge[r] is None:
            edge[r] = np.zeros(batch.adjacency[r].shape)
        else:
            edge[r] = np.sum(act.edge[r] * act.edge_values[r], axis=-1)
    return BatchAttribution(node, edge)


def _model_parts(model):
    return model.params_, model.arch_, model.alpha, model.beta


@dataclass
class NodeDiseases:
    node: str
    top1: str
    top2: str
    degenerate: bool = False


@dataclass
class Explanation:
    study_id: str
    class_id: int
    node_names: list[str]
    node_scores: dict[str, np.ndarray]  # relation -> (K,)
    edge_scores: dict[str, np.ndarray]  # relation -> (K, K)
    adjacency: dict[str, np.ndarray]
    target: str = "probability"
    theta_edge: float = THETA_EDGE
    top_diseases: list[NodeDiseases] | None = field(default=None)

    @property
    def disease(self) -> str:
        return DISEASES[self.class_id] if self.class_id < len(DISEASES) else str(self.class_id)

    @property
    def node_total(self) -> np.ndarray:
        return sum(self.node_scores[r] for r in RELATIONS)

    @property
    def normalized(self) -> np.ndarray:
        return normalize(self.node_total)

    def edge_normalized(self, relation: str) -> np.ndarray:
        return normalize(self.edge_scores[relation])

    @property
    def top1_node(self) -> int:
        """Node with the largest positive contribution (largest magnitude if
        none is positive)."""
        return int(top_node(self.node_total))

    def selected_edges(self, theta_edge: float | None = None) -> list[tuple[str, int, int, float]]:
        """(relation, i, j, normalized) for present edges above the threshold."""
        theta = self.theta_edge if theta_edge is None else theta_edge
        out = []
        for r in RELATIONS:
            norm = self.edge_normalized(r)
            keep = (norm > theta) & (self.adjacency[r] > 0)
            for i, j in zip(*np.nonzero(keep)):
                out.append((r, int(i), int(j), float(norm[i, j])))
        return out

    def to_json(self) -> dict:
        norm = self.normalized
        total = self.node_total
        out = {
            "study_id": self.study_id,
            "class": self.disease,
            "target": self.target,
            "nodes": [
                {"name": n, "score": float(total[k]), "normalized": float(norm[k])}
                for k, n in enumerate(self.node_names)
            ],
            "edges": [
                {"relation": r, "i": i, "j": j, "normalized": v} for r, i, j, v in self.selected_edges()
            ],
        }
        if self.top_diseases is not None:
            out["top_diseases"] = [
                {"node": t.node, "top1": t.top1, "top2": t.top2, "degenerate": t.degenerate}
                for t in self.top_diseases
            ]
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)


def attribute(
    graph: AnatomyGraph,
    model,
    class_id: int,
    target: str = "probability",
    theta_edge: float = THETA_EDGE,
) -> Explanation:
    """Explain one class prediction of a fitted classifier on one graph.

    ``model`` needs ``params_``, ``arch_``, ``alpha`` and ``beta`` (as set by
    ``MultiRelationGraphClassifier.fit``).
    """
    params, arch, alpha, beta = _model_parts(model)
    batch = stack_graphs([graph], arch.n_slots)
    att = attribute_batch(params, arch, batch, class_id, alpha, beta, target)
    idx = graph.region_index
    grid = np.ix_(idx, idx)
    return Explanation(
        study_id=graph.study_id,
        class_id=class_id,
        node_names=graph.names,
        node_scores={r: att.node[r][0, idx] for r in RELATIONS},
        edge_scores={r: att.edge[r][0][grid] for r in RELATIONS},
        adjacency={r: graph.adjacency(r) for r in RELATIONS},
        target=target,
        theta_edge=theta_edge,
    )


def class_scores_batch(params, arch, batch, alpha=0.3, beta=0.4, target="probability") -> np.ndarray:
    """Summed node scores for every class, shape (B, N, C)."""
    pred = forward(params, batch, arch, alpha, beta)
    return np.stack(
        [attribute_batch(params, arch, batch, c, alpha, beta, target, pred).node_total for c in range(arch.n_classes)],
        axis=-1,
    )


def rank_top2(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-2 classes per row of a (K, C) score matrix.

    Ties go to the lower class index; an all-zero row yields classes 0 and 1
    and is flagged as degenerate.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.shape[-1] < 2:
        raise ValueError("need at least 2 classes to rank")
    order = np.argsort(-scores, axis=-1, kind="stable")
    degenerate = ~np.any(scores != 0, axis=-1)
    return order[..., 0], order[..., 1], degenerate


def top_diseases_per_node(graph: AnatomyGraph, model, target: str = "probability") -> list[NodeDiseases]:
    params, arch, alpha, beta = _model_parts(model)
    batch = stack_graphs([graph], arch.n_slots)
    scores = class_scores_batch(params, arch, batch, alpha, beta, target)[0, graph.region_index]
    top1, top2, degenerate = rank_top2(scores)
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} node(s) have all-zero attributions; using class order",
            DegenerateAttributionWarning,
            stacklevel=2,
        )
    names = DISEASES if arch.n_classes == len(DISEASES) else [str(c) for c in range(arch.n_classes)]
    return [
        NodeDiseases(graph.nodes[k].name, names[top1[k]], names[top2[k]], bool(degenerate[k]))
        for k in range(graph.n_nodes)
    ]


def corpus_top_diseases(
    params, arch, batch: GraphBatch, alpha=0.3, beta=0.4, target="probability", chunk: int = 256
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per region slot top-1/top-2 classes from attributions summed over a corpus."""
    total = np.zeros((arch.n_slots, arch.n_classes))
    for start in range(0, len(batch), chunk):
        sub = batch.subset(np.arange(start, min(start + chunk, len(batch))))
        scores = class_scores_batch(params, arch, sub, alpha, beta, target)
        total += np.einsum("bnc,bn->nc", scores, sub.node_mask)
    return rank_top2(total)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_overlay(
    graph: AnatomyGraph,
    explanation: Explanation,
    theta_edge: float = THETA_EDGE,
    theta_node: float = THETA_NODE,
    size: int = 512,
) -> str:
    """SVG with the most important node in red, other nodes above
    ``theta_node`` in yellow and edges above ``theta_edge`` as green arrows."""
    norm = explanation.normalized
    top = explanation.top1_node if graph.n_nodes else -1
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f"<title>{escape(explanation.study_id)} {escape(explanation.disease)}</title>",
        '<defs><marker id="arrow" markerWidth="8" markerHeight="8" refX="7" refY="4" orient="auto">'
        '<path d="M0,0 L8,4 L0,8 z" fill="green"/></marker></defs>',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="black"/>',
    ]

    def box(k: int, color: str) -> str:
        x, y, w, h = (v * size for v in graph.nodes[k].bbox)
        name = escape(graph.nodes[k].name, {'"': "&quot;"})
        return (
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" height="{_fmt(h)}" fill="none" '
            f'stroke="{color}" stroke-width="2" data-node="{name}" data-score="{norm[k]:.4f}"/>'
        )

    for k in range(graph.n_nodes):
        if k != top and norm[k] > theta_node:
            parts.append(box(k, "yellow"))
    if top >= 0:
        parts.append(box(top, "red"))

    # one arrow per node pair, keeping the strongest relation
    best: dict[tuple[int, int], tuple[float, str]] = {}
    for r, i, j, v in explanation.selected_edges(theta_edge):
        if (i, j) not in best or v > best[(i, j)][0]:
            best[(i, j)] = (v, r)
    for (i, j), (v, r) in sorted(best.items()):
        (x1, y1), (x2, y2) = (np.asarray(graph.nodes[k].center) * size for k in (i, j))
        parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" stroke="green" '
            f'stroke-width="2" marker-end="url(#arrow)" data-relation="{r}" data-score="{v:.4f}"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
