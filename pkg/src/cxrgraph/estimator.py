"""scikit-learn compatible classifier around the multi-relation graph network."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .graph_builder import N_REGIONS, RELATIONS
from .metrics import auc, hard_targets, topk_accuracy
from .network import (
    LOSS_MODES,
    Architecture,
    GraphBatch,
    backward,
    check_fusion,
    forward,
    init_params,
    loss_grad,
    loss_value,
    stack_graphs,
)
from .optim import make_optimizer

log = logging.getLogger(__name__)

NOT_MENTIONED = 0.1
PREDICT_CHUNK = 256


class DivergenceError(FloatingPointError):
    """Training loss became NaN or infinite."""


def as_batch(X, n_slots: int = N_REGIONS) -> GraphBatch:
    if isinstance(X, GraphBatch):
        batch = X
    else:
        batch = stack_graphs(list(X), n_slots)
    check_array(batch.features.reshape(len(batch), -1), ensure_all_finite=True)
    return batch


def evaluate_scores(scores, soft_labels, positive_threshold=1.0, exclude_unmentioned=False) -> dict:
    """Mean/per-class AUC and top-5/top-10 against hardened soft labels."""
    soft_labels = np.asarray(soft_labels, dtype=float)
    y = hard_targets(soft_labels, positive_threshold)
    mask = soft_labels != NOT_MENTIONED if exclude_unmentioned else None
    per_class, mean = auc(scores, y, mask)
    return {
        "mean_auc": mean,
        "per_class_auc": per_class,
        "top5": topk_accuracy(scores, y, 5),
        "top10": topk_accuracy(scores, y, 10),
    }


class MultiRelationGraphClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label classifier over anatomy graphs (spatial, semantic, implicit).

    ``X`` is a list of ``AnatomyGraph`` (or a prebuilt ``GraphBatch``); ``y``
    an ``(n_samples, n_classes)`` array of soft labels in [0, 1]. With
    ``loss="hard"`` every label below 1.0 is trained as a negative.

    Parameters
    ----------
    n_layers, hidden_dim, edge_dim : int
        Graph convolution depth, node width and edge-feature width.
    head_hidden : int or None
        Hidden width of each relation's MLP head; None gives a linear head.
    aggregation : {"sum", "mean"}
        Neighbour message reduction.
    alpha, beta : float
        Fusion weights of the spatial and semantic heads.
    loss : {"hard", "expert", "expert_literal"}
    optimizer : {"adam", "sgd_momentum"}
    learning_rate, momentum : float
        ``momentum`` is Adam's first-moment decay for ``optimizer="adam"``.
    batch_size, epochs : int
    random_state : int
        Seeds initialization and mini-batch order.
    n_slots : int
        Number of region slots (26 for the anatomy layout).
    """

    def __init__(
        self,
        n_layers=3,
        hidden_dim=64,
        edge_dim=8,
        head_hidden=None,
        aggregation="mean",
        alpha=0.3,
        beta=0.4,
        loss="expert",
        optimizer="adam",
        learning_rate=0.01,
        momentum=0.9,
        batch_size=64,
        epochs=20,
        random_state=0,
        n_slots=N_REGIONS,
        positive_threshold=1.0,
        exclude_unmentioned=False,
    ):
        self.n_layers = n_layers
        self.hidden_dim = hidden_dim
        self.edge_dim = edge_dim
        self.head_hidden = head_hidden
        self.aggregation = aggregation
        self.alpha = alpha
        self.beta = beta
        self.loss = loss
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state
        self.n_slots = n_slots
        self.positive_threshold = positive_threshold
        self.exclude_unmentioned = exclude_unmentioned

    def _validate(self):
        check_fusion(self.alpha, self.beta)
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")
        if self.aggregation not in ("sum", "mean"):
            raise ValueError(f"aggregation must be 'sum' or 'mean', got {self.aggregation!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def fit(self, X, y, X_val=None, y_val=None, init_params_=None):
        """Train with mini-batch updates; keeps the epoch with best validation AUC.

        Without validation data the final epoch is kept. ``init_params_``
        overrides the seeded initialization (used for warm starts).
        """
        self._validate()
        batch = as_batch(X, self.n_slots)
        y = check_array(y, ensure_2d=True, dtype=float)
        if len(y) != len(batch):
            raise ValueError(f"{len(batch)} graphs but {len(y)} label rows")
        self.arch_ = Architecture(
            d_in=batch.features.shape[2],
            n_classes=y.shape[1],
            n_slots=self.n_slots,
            n_layers=self.n_layers,
            hidden_dim=self.hidden_dim,
            edge_dim=self.edge_dim,
            head_hidden=self.head_hidden or None,
            aggregation=self.aggregation,
        )
        params = init_params(self.arch_, self.random_state)
        if init_params_ is not None:
            params = {k: np.array(v, dtype=float) for k, v in init_params_.items()}
        targets = hard_targets(y).astype(float) if self.loss == "hard" else y
        opt = make_optimizer(self.optimizer, params, self.learning_rate, self.momentum)
        shuffle_rng = np.random.default_rng([self.random_state, 1])
        val_batch = as_batch(X_val, self.n_slots) if X_val is not None else None

        self.classes_ = np.arange(y.shape[1])
        self.history_ = []
        best_auc, best = -np.inf, None
        n = len(batch)
        for epoch in range(1, self.epochs + 1):
            perm = shuffle_rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = perm[start : start + self.batch_size]
                pred = forward(params, batch.subset(idx), self.arch_, self.alpha, self.beta)
                value = loss_value(pred.fused, targets[idx], self.loss)
                if not np.isfinite(value):
                    raise DivergenceError(f"loss is {value} at epoch {epoch}")
                grads, _ = backward(params, pred, grad_fused=loss_grad(pred.fused, targets[idx], self.loss))
                opt.step(params, grads)
                total += value * len(idx)
            row = {"epoch": epoch, "train_loss": total / n}
            if val_batch is not None:
                self.params_ = params
                scores = self.predict_proba(val_batch)
                m = evaluate_scores(scores, y_val, self.positive_threshold, self.exclude_unmentioned)
                row.update(val_mean_auc=m["mean_auc"], top5=m["top5"], top10=m["top10"])
                if m["mean_auc"] > best_auc:
                    best_auc, best = m["mean_auc"], {k: v.copy() for k, v in params.items()}
                    self.best_epoch_ = epoch
            log.info("epoch %d %s", epoch, row)
            self.history_.append(row)
        if best is None:
            best = {k: v.copy() for k, v in params.items()}
            self.best_epoch_ = self.epochs
        self.params_ = best
        return self

    def save(self, path) -> None:
        """Write the fitted parameters as an MRGC checkpoint."""
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.arch_, self.alpha, self.beta)

    @classmethod
    def load(cls, path, **params) -> "MultiRelationGraphClassifier":
        """Rebuild a fitted classifier from a checkpoint; extra ``params`` set
        the training-only hyperparameters."""
        weights, arch, alpha, beta = load_checkpoint(path)
        model = cls(
            n_layers=arch.n_layers,
            hidden_dim=arch.hidden_dim,
            edge_dim=arch.edge_dim,
            head_hidden=arch.head_hidden,
            aggregation=arch.aggregation,
            alpha=alpha,
            beta=beta,
            n_slots=arch.n_slots,
            **params,
        )
        model.arch_ = arch
        model.params_ = weights
        model.classes_ = np.arange(arch.n_classes)
        return model

    def forward(self, X):
        check_is_fitted(self, "params_")
        return forward(self.params_, as_batch(X, self.n_slots), self.arch_, self.alpha, self.beta)

    def predict_proba(self, X):
        """Fused per-class probabilities, shape (n_samples, n_classes)."""
        check_is_fitted(self, "params_")
        batch = as_batch(X, self.n_slots)
        out = []
        for start in range(0, len(batch), PREDICT_CHUNK):
            sub = batch.subset(np.arange(start, min(start + PREDICT_CHUNK, len(batch))))
            out.append(forward(self.params_, sub, self.arch_, self.alpha, self.beta).fused)
        return np.concatenate(out)

    def relation_proba(self, X) -> dict[str, np.ndarray]:
        pred = self.forward(X)
        return {r: pred.scores[r] for r in RELATIONS}

    def predict(self, X):
        return (self.predict_proba(X) >= 0.5).astype(int)

    def evaluate(self, X, y) -> dict:
        return evaluate_scores(self.predict_proba(X), y, self.positive_threshold, self.exclude_unmentioned)

    def score(self, X, y, sample_weight=None):
        """Mean per-class AUC against hardened labels."""
        return self.evaluate(X, y)["mean_auc"]
