import numpy as np

from cxrgraph.graph_builder import (
    AnatomicalRegion,
    AnatomyGraph,
    build_implicit,
    build_spatial,
    edge_feature_tensor,
)
from cxrgraph.network import Architecture, backward, forward, init_params, loss_grad, loss_value, stack_graphs


def random_graph(rng, K, d, study_id="g"):
    nodes = [
        AnatomicalRegion(
            f"n{i}",
            (rng.uniform(0, 0.5), rng.uniform(0, 0.5), rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5)),
            rng.normal(size=d),
        )
        for i in range(K)
    ]
    sem = np.triu(rng.integers(0, 3, (K, K)) / 2.0, 1)
    return AnatomyGraph(
        nodes, np.arange(K), build_spatial(nodes, 0.2), sem + sem.T, build_implicit(K), edge_feature_tensor(nodes),
        study_id=study_id,
    )


def random_instance(rng, K, d, n_layers=3, n_classes=2, head_hidden=None, aggregation="mean", batch=1):
    arch = Architecture(
        d_in=d, n_classes=n_classes, n_slots=K, n_layers=n_layers, hidden_dim=3, edge_dim=2,
        head_hidden=head_hidden, aggregation=aggregation,
    )
    b = stack_graphs([random_graph(rng, K, d, f"g{i}") for i in range(batch)], K)
    params = init_params(arch, int(rng.integers(1 << 30)))
    for k in params:
        params[k] = params[k] + rng.normal(scale=0.3, size=params[k].shape)
    return arch, b, params


def fd_relative_error(arch, batch, params, target, mode="expert", alpha=0.3, beta=0.4, h=1e-5):
    """Worst relative error between analytic and central-difference gradients."""

    def loss(p):
        return loss_value(forward(p, batch, arch, alpha, beta).fused, target, mode)

    pred = forward(params, batch, arch, alpha, beta)
    grads, _ = backward(params, pred, grad_fused=loss_grad(pred.fused, target, mode))
    worst = 0.0
    for name, value in params.items():
        num = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            old = value[idx]
            value[idx] = old + h
            up = loss(params)
            value[idx] = old - h
            down = loss(params)
            value[idx] = old
            num[idx] = (up - down) / (2 * h)
        scale = max(np.abs(num).max(), np.abs(grads[name]).max(), 1e-8)
        worst = max(worst, np.abs(num - grads[name]).max() / scale)
    return worst


def separable_dataset(n, K=4, d=3, seed=0):
    """Graphs on K slots; class c is positive iff feature c averaged over nodes is positive."""
    rng = np.random.default_rng(seed)
    graphs = [random_graph(rng, K, d, f"s{i}") for i in range(n)]
    y = np.stack([(g.features.mean(axis=0) > 0).astype(float) for g in graphs])
    return graphs, y
