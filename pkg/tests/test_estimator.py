import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import cross_val_score

from latentdist import LatentDistributionClassifier
from latentdist.datagen import SyntheticSpec, generate
from latentdist.model import MissingHeadsError


@pytest.fixture(scope="module")
def data():
    ds = generate(SyntheticSpec(num_classes=3, feature_dim=4, samples_per_class=40, test_per_class=20,
                                seed=2, separation=5.0))
    return ds.train.X, ds.train.y, ds.test.X, ds.test.y


def small(**kw):
    # a few dozen steps only: the full similarity weight would dominate such a short run
    base = dict(gamma=10.0, max_epoch=6, batch_size=24, hidden_dim=16, head_dim=8, beta=2, lr=1e-2, lr_decay_epochs=())
    base.update(kw)
    return LatentDistributionClassifier(**base)


def test_get_params_and_clone_round_trip():
    est = small(omega=0.25, random_state=4)
    params = est.get_params()
    assert params["omega"] == 0.25 and params["random_state"] == 4
    cloned = clone(est)
    assert cloned.get_params() == params
    est.set_params(gamma=10.0)
    assert est.gamma == 10.0


def test_fit_predict_with_string_labels(data):
    X, y, Xt, yt = data
    names = np.array(["calm", "happy", "sad"])
    est = small().fit(X, names[y])
    pred = est.predict(Xt)
    assert set(pred) <= set(names)
    assert np.mean(pred == names[yt]) > 0.7
    proba = est.predict_proba(Xt)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(est.classes_[proba.argmax(axis=1)], pred)
    assert est.n_features_in_ == 4
    assert len(est.history_) == 6


def test_fit_is_deterministic(data):
    X, y, Xt, _ = data
    a = small(random_state=3).fit(X, y).decision_function(Xt)
    b = small(random_state=3).fit(X, y).decision_function(Xt)
    assert a.tobytes() == b.tobytes()


def test_unfitted_and_wrong_width_are_rejected(data):
    X, y, _, _ = data
    with pytest.raises(NotFittedError):
        small().predict(X)
    est = small(max_epoch=1).fit(X, y)
    with pytest.raises(ValueError):
        est.predict(X[:, :3])
    with pytest.raises(ValueError):
        small().fit(X, np.zeros(len(X)))
    with pytest.raises(ValueError):
        small().fit(X[:5], y[:4])


def test_training_heads_and_deployment(data):
    X, y, Xt, _ = data
    est = small(max_epoch=2).fit(X, y)
    latent = est.latent_distribution(X[:9], y[:9])
    np.testing.assert_allclose(latent.sum(axis=1), 1.0, atol=1e-12)
    idx = np.concatenate([np.flatnonzero(y == k)[:10] for k in range(3)])
    alpha = est.confidence(X[idx], y[idx])
    assert np.all((alpha > 0) & (alpha < 1))
    with pytest.raises(ValueError):
        est.latent_distribution(X[:2], [7, 8])
    slim = est.deployment_model()
    assert slim.target_logits(Xt).tobytes() == est.decision_function(Xt).tobytes()
    with pytest.raises(MissingHeadsError):
        slim.aux_logits(Xt)


def test_works_inside_cross_validation(data):
    X, y, _, _ = data
    scores = cross_val_score(small(max_epoch=2), X, y, cv=2)
    assert scores.shape == (2,)
