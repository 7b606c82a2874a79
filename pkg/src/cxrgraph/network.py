"""Three-relation edge-feature graph convolution network, with analytic gradients.

Per relation r and layer l, for every node k::

    F_k' = relu(W1 F_k + sum_{j in N(k)} W3 [e_jk * W2 F_j ; edge_jk])
    edge_jk' = W4 edge_jk

where e_jk = A_jk * dep_jk (A the relation's adjacency, dep a trainable
per-slot scalar initialised to 1). Node features are mean-pooled per graph,
fed to one head per relation, passed through a sigmoid, and fused as
``alpha * sp + beta * se + (1 - alpha - beta) * im``.

Graphs are batched on a fixed grid of ``n_slots`` region slots; absent
regions are all-zero rows with no edges, and stay zero through every layer
since the convolutions carry no bias.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph_builder import EDGE_FEATURE_DIM, N_REGIONS, RELATIONS, AnatomyGraph

CLAMP_EPS = 1e-7
LOSS_MODES = ("hard", "expert", "expert_literal")


class StaleCacheError(RuntimeError):
    """backward() was called with parameters that differ from the forward pass."""


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    d_in: int
    n_classes: int = 18
    n_slots: int = N_REGIONS
    n_layers: int = 3
    hidden_dim: int = 64
    edge_dim: int = 8
    head_hidden: int | None = None
    aggregation: str = "mean"

    def node_dim(self, layer: int) -> int:
        return self.d_in if layer == 0 else self.hidden_dim

    def edge_width(self, layer: int) -> int:
        return EDGE_FEATURE_DIM if layer == 0 else self.edge_dim

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes in their declared (checkpoint) order."""
        shapes: dict[str, tuple[int, ...]] = {}
        L = self.n_layers
        for r in RELATIONS:
            for l in range(L):
                d0, d1 = self.node_dim(l), self.node_dim(l + 1)
                p0 = self.edge_width(l)
                shapes[f"{r}.{l}.W1"] = (d1, d0)
                shapes[f"{r}.{l}.W2"] = (d1, d0)
                shapes[f"{r}.{l}.W3"] = (d1, d1 + p0)
                # the last layer's edge update never reaches the output
                if l < L - 1:
                    shapes[f"{r}.{l}.W4"] = (self.edge_width(l + 1), p0)
                shapes[f"{r}.{l}.dep"] = (self.n_slots, self.n_slots)
        d_out = self.node_dim(L)
        for r in RELATIONS:
            if self.head_hidden:
                shapes[f"{r}.head.W0"] = (self.head_hidden, d_out)
                shapes[f"{r}.head.b0"] = (self.head_hidden,)
                shapes[f"{r}.head.W1"] = (self.n_classes, self.head_hidden)
            else:
                shapes[f"{r}.head.W1"] = (self.n_classes, d_out)
            shapes[f"{r}.head.b1"] = (self.n_classes,)
        return shapes


def init_params(arch: Architecture, seed: int) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit dependencies.

    Draws happen in declared parameter order from ``default_rng(seed)``.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        kind = name.rsplit(".", 1)[1]
        if kind == "dep":
            params[name] = np.ones(shape)
        elif kind.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


@dataclass
class GraphBatch:
    features: np.ndarray  # (B, N, d)
    adjacency: dict[str, np.ndarray]  # relation -> (B, N, N)
    edge_features: np.ndarray  # (B, N, N, 4)
    node_mask: np.ndarray  # (B, N)
    study_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_nodes(self) -> np.ndarray:
        return self.node_mask.sum(axis=1)

    def subset(self, idx) -> "GraphBatch":
        idx = np.asarray(idx)
        return GraphBatch(
            self.features[idx],
            {r: a[idx] for r, a in self.adjacency.items()},
            self.edge_features[idx],
            self.node_mask[idx],
            [self.study_ids[i] for i in idx] if self.study_ids else [],
        )


def stack_graphs(graphs: Sequence[AnatomyGraph], n_slots: int = N_REGIONS) -> GraphBatch:
    """Scatter graphs onto a padded ``n_slots`` grid indexed by region slot."""
    if not graphs:
        raise ValueError("no graphs to stack")
    d = graphs[0].features.shape[1]
    B = len(graphs)
    F = np.zeros((B, n_slots, d))
    E = np.zeros((B, n_slots, n_slots, EDGE_FEATURE_DIM))
    A = {r: np.zeros((B, n_slots, n_slots)) for r in RELATIONS}
    mask = np.zeros((B, n_slots))
    for b, g in enumerate(graphs):
        idx = g.region_index
        if idx.max(initial=-1) >= n_slots or len(set(idx.tolist())) != len(idx):
            raise ValueError(f"graph {g.study_id!r}: region slots must be unique and < {n_slots}")
        feats = g.features
        if feats.shape[1] != d:
            raise DimensionMismatchError(f"graph {g.study_id!r} has feature dim {feats.shape[1]}, expected {d}")
        F[b, idx] = feats
        grid = np.ix_(idx, idx)
        E[b][grid] = g.edge_features
        for r in RELATIONS:
            A[r][b][grid] = g.adjacency(r)
        mask[b, idx] = 1.0
    return GraphBatch(F, A, E, mask, [g.study_id for g in graphs])


def fingerprint(params: dict[str, np.ndarray]) -> int:
    h = 0
    for name in sorted(params):
        h = zlib.crc32(np.ascontiguousarray(params[name]).tobytes(), zlib.crc32(name.encode(), h))
    return h


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _sigmoid_grad(z):
    # s(1-s) from the logit; stays nonzero where s itself rounds to 1
    e = np.exp(-np.abs(z))
    return e / (1.0 + e) ** 2


@dataclass
class _LayerCache:
    F: np.ndarray
    E: np.ndarray
    H: np.ndarray
    eff: np.ndarray
    mask: np.ndarray
    norm: np.ndarray | None
    Magg: np.ndarray
    Eagg: np.ndarray
    Z: np.ndarray


@dataclass
class Prediction:
    """Forward-pass output; keeps the activations needed by backward()."""

    scores: dict[str, np.ndarray]  # relation -> sigmoid head output (B, C)
    logits: dict[str, np.ndarray]
    fused: np.ndarray  # (B, C)
    node_features: dict[str, np.ndarray]  # F^L per relation (B, N, d_L)
    pooled: dict[str, np.ndarray]
    alpha: float
    beta: float
    arch: Architecture
    batch: GraphBatch
    layers: dict[str, list[_LayerCache]] = field(repr=False, default_factory=dict)
    head_hidden: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    params_fingerprint: int = 0

    def weight(self, relation: str) -> float:
        return {"sp": self.alpha, "se": self.beta, "im": 1.0 - self.alpha - self.beta}[relation]


def check_fusion(alpha: float, beta: float) -> None:
    if alpha < 0 or beta < 0 or alpha + beta > 1 + 1e-12:
        raise ValueError(f"need alpha, beta >= 0 and alpha + beta <= 1; got {alpha}, {beta}")


def conv_layer(params, prefix: str, F, E, A, arch: Architecture, last: bool):
    """One edge-feature convolution; returns (F_next, E_next, cache)."""
    W1, W2, W3 = params[f"{prefix}.W1"], params[f"{prefix}.W2"], params[f"{prefix}.W3"]
    if F.shape[-1] != W1.shape[1] or E.shape[-1] != W3.shape[1] - W1.shape[0]:
        raise DimensionMismatchError(
            f"{prefix}: got node dim {F.shape[-1]}, edge dim {E.shape[-1]}; "
            f"weights expect {W1.shape[1]}, {W3.shape[1] - W1.shape[0]}"
        )
    dn = W1.shape[0]
    mask = (A > 0).astype(float)
    eff = A * params[f"{prefix}.dep"]
    H = F @ W2.T
    Magg = np.matmul(eff.transpose(0, 2, 1), H)  # sum_j e_jk H_j
    Eagg = np.einsum("bjk,bjkp->bkp", mask, E)
    norm = None
    if arch.aggregation == "mean":
        norm = 1.0 / np.maximum(mask.sum(axis=1), 1.0)
        Magg = Magg * norm[..., None]
        Eagg = Eagg * norm[..., None]
    Z = F @ W1.T + Magg @ W3[:, :dn].T + Eagg @ W3[:, dn:].T
    F_next = np.maximum(Z, 0.0)
    E_next = None if last else E @ params[f"{prefix}.W4"].T
    return F_next, E_next, _LayerCache(F, E, H, eff, mask, norm, Magg, Eagg, Z)


def forward(params, batch: GraphBatch, arch: Architecture, alpha: float = 0.3, beta: float = 0.4) -> Prediction:
    check_fusion(alpha, beta)
    if batch.features.shape[1] != arch.n_slots:
        raise DimensionMismatchError(f"batch has {batch.features.shape[1]} slots, model expects {arch.n_slots}")
    n = np.maximum(batch.n_nodes, 1.0)[:, None]
    pred = Prediction({}, {}, None, {}, {}, alpha, beta, arch, batch)
    for r in RELATIONS:
        F, E = batch.features, batch.edge_features
        caches = []
        for l in range(arch.n_layers):
            F, E, c = conv_layer(params, f"{r}.{l}", F, E, batch.adjacency[r], arch, l == arch.n_layers - 1)
            caches.append(c)
        pred.layers[r] = caches
        pred.node_features[r] = F
        pooled = F.sum(axis=1) / n
        pred.pooled[r] = pooled
        if arch.head_hidden:
            U = pooled @ params[f"{r}.head.W0"].T + params[f"{r}.head.b0"]
            pred.head_hidden[r] = U
            x = np.maximum(U, 0.0)
        else:
            x = pooled
        z = x @ params[f"{r}.head.W1"].T + params[f"{r}.head.b1"]
        pred.logits[r] = z
        pred.scores[r] = _sigmoid(z)
    pred.fused = sum(pred.weight(r) * pred.scores[r] for r in RELATIONS)
    pred.params_fingerprint = fingerprint(params)
    return pred


# ---------------------------------------------------------------- losses


def _clamp(yhat):
    return np.clip(yhat, CLAMP_EPS, 1.0 - CLAMP_EPS)


def loss_hard(yhat, y) -> float:
    """Mean binary cross-entropy against 0/1 targets."""
    q = _clamp(np.asarray(yhat, dtype=float))
    y = np.asarray(y, dtype=float)
    return float(np.mean(np.where(y == 1.0, -np.log(q), -np.log1p(-q))))


def loss_expert(yhat, p, literal: bool = False) -> float:
    """Cross-entropy against expert probabilities.

    Default: mean over classes of soft binary cross-entropy. ``literal``:
    ``-sum_c p_c log yhat_c`` per study, averaged over studies.
    """
    q = _clamp(np.asarray(yhat, dtype=float))
    p = np.asarray(p, dtype=float)
    if literal:
        return float(np.mean(np.sum(-p * np.log(q), axis=-1)))
    return float(np.mean(-(p * np.log(q) + (1.0 - p) * np.log1p(-q))))


def loss_value(yhat, target, mode: str) -> float:
    if mode == "hard":
        return loss_hard(yhat, target)
    if mode == "expert":
        return loss_expert(yhat, target)
    if mode == "expert_literal":
        return loss_expert(yhat, target, literal=True)
    raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")


def loss_grad(yhat, target, mode: str) -> np.ndarray:
    """d(loss)/d(yhat) for the batch-mean loss; zero where clamping is active."""
    yhat = np.asarray(yhat, dtype=float)
    q = _clamp(yhat)
    active = (yhat > CLAMP_EPS) & (yhat < 1.0 - CLAMP_EPS)
    B = yhat.shape[0] if yhat.ndim > 1 else 1
    if mode == "expert_literal":
        g = -target / q / B
    elif mode in ("hard", "expert"):
        g = (q - target) / (q * (1.0 - q)) / yhat.size
    else:
        raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    return np.where(active, g, 0.0)


# ---------------------------------------------------------------- backward


@dataclass
class ActivationGrads:
    """Gradients w.r.t. last-layer node features and the last consumed edge features."""

    node: dict[str, np.ndarray]  # relation -> (B, N, d_L)
    edge: dict[str, np.ndarray | None]  # relation -> (B, N, N, p_{L-1}) or None when L == 0
    edge_values: dict[str, np.ndarray | None]


def backward(
    params,
    pred: Prediction,
    grad_fused: np.ndarray | None = None,
    grad_logits: dict[str, np.ndarray] | None = None,
    fusion_grads: bool = False,
):
    """Backpropagate from the fused output (or per-relation logits).

    Returns ``(grads, activation_grads)``; ``grads`` has one entry per
    parameter, plus ``alpha``/``beta`` when ``fusion_grads`` is set.
    """
    if fingerprint(params) != pred.params_fingerprint:
        raise StaleCacheError("parameters changed since forward(); run forward again")
    if (grad_fused is None) == (grad_logits is None):
        raise ValueError("pass exactly one of grad_fused or grad_logits")
    arch = pred.arch
    batch = pred.batch
    n = np.maximum(batch.n_nodes, 1.0)[:, None, None]
    grads: dict[str, np.ndarray] = {}
    act = ActivationGrads({}, {}, {})
    for r in RELATIONS:
        if grad_logits is not None:
            dz = grad_logits[r]
        else:
            dz = pred.weight(r) * grad_fused * _sigmoid_grad(pred.logits[r])
        if arch.head_hidden:
            U = pred.head_hidden[r]
            V = np.maximum(U, 0.0)
            grads[f"{r}.head.W1"] = dz.T @ V
            grads[f"{r}.head.b1"] = dz.sum(axis=0)
            dU = (dz @ params[f"{r}.head.W1"]) * (U > 0)
            grads[f"{r}.head.W0"] = dU.T @ pred.pooled[r]
            grads[f"{r}.head.b0"] = dU.sum(axis=0)
            dpool = dU @ params[f"{r}.head.W0"]
        else:
            grads[f"{r}.head.W1"] = dz.T @ pred.pooled[r]
            grads[f"{r}.head.b1"] = dz.sum(axis=0)
            dpool = dz @ params[f"{r}.head.W1"]
        dF = dpool[:, None, :] / n * batch.node_mask[..., None]
        act.node[r] = dF
        act.edge[r] = None
        act.edge_values[r] = None
        dE_next = None
        for l in reversed(range(arch.n_layers)):
            c = pred.layers[r][l]
            prefix = f"{r}.{l}"
            W1, W2, W3 = params[f"{prefix}.W1"], params[f"{prefix}.W2"], params[f"{prefix}.W3"]
            dn = W1.shape[0]
            dZ = dF * (c.Z > 0)
            flatZ = dZ.reshape(-1, dn)
            grads[f"{prefix}.W1"] = flatZ.T @ c.F.reshape(-1, c.F.shape[-1])
            grads[f"{prefix}.W3"] = np.concatenate(
                [flatZ.T @ c.Magg.reshape(-1, dn), flatZ.T @ c.Eagg.reshape(-1, c.Eagg.shape[-1])],
                axis=1,
            )
            dMagg = dZ @ W3[:, :dn]
            dEagg = dZ @ W3[:, dn:]
            if c.norm is not None:
                dMagg = dMagg * c.norm[..., None]
                dEagg = dEagg * c.norm[..., None]
            dH = np.matmul(c.eff, dMagg)  # sum_k e_jk dMagg_k
            deff = np.matmul(c.H, dMagg.transpose(0, 2, 1))  # [b, j, k] = H_j . dMagg_k
            grads[f"{prefix}.dep"] = np.sum(deff * batch.adjacency[r], axis=0)
            grads[f"{prefix}.W2"] = dH.reshape(-1, dn).T @ c.F.reshape(-1, c.F.shape[-1])
            dF_prev = dZ @ W1 + dH @ W2
            dE = c.mask[..., None] * dEagg[:, None, :, :]
            if dE_next is not None:
                W4 = params[f"{prefix}.W4"]
                grads[f"{prefix}.W4"] = dE_next.reshape(-1, W4.shape[0]).T @ c.E.reshape(-1, W4.shape[1])
                dE = dE + dE_next @ W4
            if l == arch.n_layers - 1:
                act.edge[r] = dE
                act.edge_values[r] = c.E
            dF, dE_next = dF_prev, dE
    if fusion_grads and grad_fused is not None:
        grads["alpha"] = np.array(np.sum(grad_fused * (pred.scores["sp"] - pred.scores["im"])))
        grads["beta"] = np.array(np.sum(grad_fused * (pred.scores["se"] - pred.scores["im"])))
    return grads, act
