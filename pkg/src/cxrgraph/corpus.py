"""Corpus-level statistics and deterministic train/val/test splits."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .label_extractor import SoftLabelVector
from .rules import DISEASES

UNCERTAIN_BUCKETS = (1.0, 0.7, 0.5, 0.3)
CERTAIN_VALUES = (1.0, 0.1, 0.0)
SPLIT_RATIO = (8, 1, 1)


class InsufficientCertainStudiesError(ValueError):
    pass


@dataclass(frozen=True)
class UncertaintyDistribution:
    counts: np.ndarray  # (n_diseases, len(UNCERTAIN_BUCKETS)) int

    def row(self, disease: str) -> tuple[int, ...]:
        return tuple(int(c) for c in self.counts[DISEASES.index(disease)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["disease", *(f"p{b:.1f}" for b in UNCERTAIN_BUCKETS)])
            for d, row in zip(DISEASES, self.counts):
                w.writerow([d, *(int(c) for c in row)])


@dataclass(frozen=True)
class CooccurrenceMatrix:
    counts: np.ndarray  # (n_diseases, n_diseases) int
    t_pos: float

    def __getitem__(self, pair: tuple[str, str]) -> int:
        a, b = pair
        return int(self.counts[DISEASES.index(a), DISEASES.index(b)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["disease", *DISEASES])
            for d, row in zip(DISEASES, self.counts):
                w.writerow([d, *(int(c) for c in row)])


@dataclass(frozen=True)
class DatasetSplit:
    seed: int
    train: list[str]
    val: list[str]
    test: list[str]

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "train": self.train, "val": self.val, "test": self.test}, indent=1
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        d = json.loads(Path(path).read_text())
        return cls(int(d["seed"]), list(d["train"]), list(d["val"]), list(d["test"]))


def _matrix(labels: Sequence[SoftLabelVector]) -> np.ndarray:
    if not labels:
        return np.zeros((0, len(DISEASES)))
    return np.stack([v.probabilities() for v in labels])


def build_distribution(labels: Sequence[SoftLabelVector]) -> UncertaintyDistribution:
    P = _matrix(labels)
    counts = np.stack([(P == b).sum(axis=0) for b in UNCERTAIN_BUCKETS], axis=1)
    return UncertaintyDistribution(counts.astype(np.int64))


def build_cooccurrence(labels: Sequence[SoftLabelVector], t_pos: float = 1.0) -> CooccurrenceMatrix:
    if not 0.0 < t_pos <= 1.0:
        raise ValueError(f"t_pos must be in (0, 1], got {t_pos}")
    pos = (_matrix(labels) >= t_pos).astype(np.int64)
    return CooccurrenceMatrix(pos.T @ pos, t_pos)


def is_certain_only(v: SoftLabelVector) -> bool:
    return all(lab.probability in CERTAIN_VALUES for lab in v.labels)


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, val, test) sizes; val and test are round-half-up of n/10."""
    tenth = int(np.floor(n / 10 + 0.5))
    return n - 2 * tenth, tenth, tenth


def split_dataset(labels: Sequence[SoftLabelVector], seed: int) -> DatasetSplit:
    """Seeded 8:1:1 study-level split whose test part holds certain-only studies.

    Procedure: ``perm = numpy.random.default_rng(seed).permutation(n)`` over
    the input order. Walking ``perm``, the first ``n_test`` certain-only
    studies form the test set; the remaining studies, still in ``perm``
    order, fill val (first ``n_val``) and then train.
    """
    n = len(labels)
    if n < 10:
        raise ValueError(f"need at least 10 studies to split, got {n}")
    n_train, n_val, n_test = split_sizes(n)
    n_certain = sum(is_certain_only(v) for v in labels)
    if n_certain < n_test:
        raise InsufficientCertainStudiesError(
            f"only {n_certain} certain-only studies; the test set needs {n_test}"
        )
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = []
    rest = []
    for i in perm:
        if len(test_idx) < n_test and is_certain_only(labels[i]):
            test_idx.append(i)
        else:
            rest.append(i)
    ids = [v.study_id for v in labels]
    return DatasetSplit(
        seed=seed,
        train=[ids[i] for i in rest[n_val:]],
        val=[ids[i] for i in rest[:n_val]],
        test=[ids[i] for i in test_idx],
    )
