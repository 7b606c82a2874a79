"""Training workflows over a dataset directory: two-phase semantic bootstrap
and fusion-weight / IoU-threshold sweeps."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import CooccurrenceMatrix, build_cooccurrence
from .estimator import MultiRelationGraphClassifier
from .explainer import corpus_top_diseases
from .graph_builder import DEFAULT_TAU, KnowledgeGraphConfig, build_semantic_phase1, build_semantic_phase2
from .io import Dataset
from .label_extractor import SoftLabelVector
from .network import GraphBatch, check_fusion, stack_graphs

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class SplitData:
    X: GraphBatch
    y: np.ndarray


def prepare_splits(dataset: Dataset, tau: float, semantic: np.ndarray, n_slots: int) -> dict[str, SplitData]:
    out = {}
    for name in SPLITS:
        ids = dataset.part(name)
        out[name] = SplitData(stack_graphs(dataset.graphs(ids, tau, semantic), n_slots), dataset.label_rows(ids))
    return out


def train_cooccurrence(dataset: Dataset, t_pos: float = 1.0) -> CooccurrenceMatrix:
    ids = dataset.part("train")
    vecs = [SoftLabelVector.from_probabilities(s, p) for s, p in zip(ids, dataset.label_rows(ids))]
    return build_cooccurrence(vecs, t_pos)


@dataclass
class TrainResult:
    model: MultiRelationGraphClassifier
    semantic: np.ndarray  # region-slot semantic adjacency used by the final model
    splits: dict[str, SplitData]
    phase1: MultiRelationGraphClassifier | None = None

    def metrics(self, split: str = "test") -> dict:
        d = self.splits[split]
        return self.model.evaluate(d.X, d.y)


def fit_on_splits(model: MultiRelationGraphClassifier, splits: dict[str, SplitData], init=None):
    return model.fit(splits["train"].X, splits["train"].y, splits["val"].X, splits["val"].y, init_params_=init)


def train_two_phase(
    dataset: Dataset,
    kg: KnowledgeGraphConfig,
    model: MultiRelationGraphClassifier,
    tau: float = DEFAULT_TAU,
    bootstrap: bool = True,
    cooccurrence_threshold: float = 0.0,
) -> TrainResult:
    """Train with knowledge-graph semantic edges, then optionally rebuild the
    semantic graph from the model's per-node top diseases and retrain.

    The rebuild ranks diseases by attribution summed over the training
    studies, per region slot, and links two regions when their top diseases
    match or co-occur in the training labels.
    """
    semantic = build_semantic_phase1(kg)
    splits = prepare_splits(dataset, tau, semantic, model.n_slots)
    fit_on_splits(model, splits)
    if not bootstrap:
        return TrainResult(model, semantic, splits)
    log.info("phase 1 best val AUC %.4f", max(h.get("val_mean_auc", np.nan) for h in model.history_))
    top1, top2, _ = corpus_top_diseases(model.params_, model.arch_, splits["train"].X, model.alpha, model.beta)
    semantic2 = build_semantic_phase2(top1, top2, train_cooccurrence(dataset), cooccurrence_threshold)
    splits2 = prepare_splits(dataset, tau, semantic2, model.n_slots)
    final = MultiRelationGraphClassifier(**model.get_params())
    fit_on_splits(final, splits2)
    return TrainResult(final, semantic2, splits2, phase1=model)


def fusion_cells(alphas: Iterable[float], betas: Iterable[float]) -> list[tuple[float, float]]:
    """Grid cells with alpha + beta <= 1; the rest are dropped."""
    return [(a, b) for a in alphas for b in betas if a + b <= 1 + 1e-12]


def sweep_fusion(
    splits: dict[str, SplitData],
    cells: Sequence[tuple[float, float]],
    base: MultiRelationGraphClassifier,
    evaluate_on: str = "test",
) -> list[dict]:
    """Retrain per (alpha, beta) cell with the base model's seed."""
    for a, b in cells:
        check_fusion(a, b)
    rows = []
    for a, b in cells:
        m = fit_on_splits(MultiRelationGraphClassifier(**{**base.get_params(), "alpha": a, "beta": b}), splits)
        res = m.evaluate(splits[evaluate_on].X, splits[evaluate_on].y)
        rows.append({"alpha": a, "beta": b, "mean_auc": res["mean_auc"], "top5": res["top5"], "top10": res["top10"]})
        log.info("alpha=%.2f beta=%.2f AUC %.4f", a, b, res["mean_auc"])
    return rows


def sweep_tau(
    dataset: Dataset,
    taus: Sequence[float],
    semantic: np.ndarray,
    base: MultiRelationGraphClassifier,
    evaluate_on: str = "test",
) -> list[dict]:
    """Rebuild the graphs and retrain per IoU threshold."""
    rows = []
    for tau in taus:
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"IoU threshold must lie in [0, 1], got {tau}")
        splits = prepare_splits(dataset, tau, semantic, base.n_slots)
        m = fit_on_splits(MultiRelationGraphClassifier(**base.get_params()), splits)
        res = m.evaluate(splits[evaluate_on].X, splits[evaluate_on].y)
        rows.append({"tau": tau, "mean_auc": res["mean_auc"], "top5": res["top5"], "top10": res["top10"]})
        log.info("tau=%.2f AUC %.4f", tau, res["mean_auc"])
    return rows


def write_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
