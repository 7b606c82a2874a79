import numpy as np
import pytest
from sklearn.base import clone

from cxrgraph.estimator import DivergenceError, MultiRelationGraphClassifier, as_batch, evaluate_scores
from cxrgraph.network import init_params

from helpers import separable_dataset

SMALL = dict(n_layers=1, hidden_dim=8, edge_dim=2, n_slots=4, batch_size=16)


@pytest.fixture(scope="module")
def data():
    X, y = separable_dataset(160, seed=0)
    return X[:120], y[:120], X[120:], y[120:]


def test_learns_separable_task(data):
    Xtr, ytr, Xte, yte = data
    m = MultiRelationGraphClassifier(epochs=30, learning_rate=0.03, **SMALL).fit(Xtr, ytr, Xte, yte)
    assert m.score(Xte, yte) > 0.95
    assert m.history_[-1]["train_loss"] < m.history_[0]["train_loss"]
    assert m.predict_proba(Xte).shape == (40, 3)
    assert set(np.unique(m.predict(Xte))) <= {0, 1}


def test_fit_is_deterministic(data):
    Xtr, ytr, _, _ = data
    a = MultiRelationGraphClassifier(epochs=2, random_state=3, **SMALL).fit(Xtr, ytr)
    b = MultiRelationGraphClassifier(epochs=2, random_state=3, **SMALL).fit(Xtr, ytr)
    assert all(np.array_equal(a.params_[k], b.params_[k]) for k in a.params_)
    c = MultiRelationGraphClassifier(epochs=2, random_state=4, **SMALL).fit(Xtr, ytr)
    assert not np.array_equal(a.params_["sp.0.W1"], c.params_["sp.0.W1"])


@pytest.mark.parametrize("optimizer", ["adam", "sgd_momentum"])
def test_zero_learning_rate_keeps_initialization(data, optimizer):
    Xtr, ytr, _, _ = data
    m = MultiRelationGraphClassifier(epochs=1, learning_rate=0.0, optimizer=optimizer, **SMALL).fit(Xtr, ytr)
    init = init_params(m.arch_, m.random_state)
    assert all(np.array_equal(m.params_[k], init[k]) for k in init)


def test_warm_start(data):
    Xtr, ytr, _, _ = data
    a = MultiRelationGraphClassifier(epochs=1, **SMALL).fit(Xtr, ytr)
    b = MultiRelationGraphClassifier(epochs=1, learning_rate=0.0, **SMALL).fit(Xtr, ytr, init_params_=a.params_)
    assert all(np.array_equal(a.params_[k], b.params_[k]) for k in a.params_)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(data):
    Xtr, ytr, _, _ = data
    m = MultiRelationGraphClassifier(epochs=5, learning_rate=1e200, optimizer="sgd_momentum", **SMALL)
    with pytest.raises(DivergenceError):
        m.fit(Xtr, ytr)


def test_hard_loss_ignores_uncertain_targets(data):
    Xtr, ytr, _, _ = data
    soft = np.where(ytr == 1, 1.0, 0.7)
    a = MultiRelationGraphClassifier(epochs=1, loss="hard", **SMALL).fit(Xtr, soft)
    b = MultiRelationGraphClassifier(epochs=1, loss="hard", **SMALL).fit(Xtr, ytr)
    assert all(np.array_equal(a.params_[k], b.params_[k]) for k in a.params_)


@pytest.mark.parametrize(
    "bad",
    [dict(alpha=0.8, beta=0.4), dict(loss="mse"), dict(aggregation="max"), dict(learning_rate=-1), dict(batch_size=0)],
)
def test_invalid_hyperparameters(data, bad):
    Xtr, ytr, _, _ = data
    with pytest.raises(ValueError):
        MultiRelationGraphClassifier(**{**SMALL, **bad}).fit(Xtr, ytr)


def test_label_count_mismatch(data):
    Xtr, ytr, _, _ = data
    with pytest.raises(ValueError):
        MultiRelationGraphClassifier(**SMALL).fit(Xtr, ytr[:-1])


def test_sklearn_protocol():
    m = MultiRelationGraphClassifier(hidden_dim=7)
    assert clone(m).get_params() == m.get_params()
    assert m.set_params(alpha=0.1).alpha == 0.1


def test_unfitted_predict_raises(data):
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        MultiRelationGraphClassifier(**SMALL).predict_proba(data[2])


def test_nonfinite_features_rejected(data):
    X = data[0][:3]
    batch = as_batch(X, 4)
    batch.features[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        as_batch(batch)


def test_evaluate_scores_unmentioned_mask():
    scores = np.array([[0.9], [0.8], [0.1]])
    soft = np.array([[1.0], [0.1], [0.0]])
    assert evaluate_scores(scores, soft)["mean_auc"] == 1.0
    # dropping the 0.1 row leaves a perfect ranking too; the 0.8 negative is gone
    m = evaluate_scores(scores, soft, exclude_unmentioned=True)
    assert m["mean_auc"] == 1.0 and m["top5"] == 1.0
