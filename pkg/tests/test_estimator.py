import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mhrnnt.datagen import CorpusSpec, generate
from mhrnnt.estimator import TransducerASR
from mhrnnt.exceptions import ContractViolation, ValidationError

SMALL = dict(vocab_size=5, feat_dim=4, enc_hidden=10, pred_hidden=10, embed_dim=4, joint_dim=10)


@pytest.fixture(scope="module")
def data():
    spec = CorpusSpec(utterance_count=16, vocab_size=5, feat_dim=4, min_len=2, max_len=4, seed=4)
    return generate(spec, "train")


@pytest.fixture(scope="module")
def fitted(data):
    return TransducerASR(**SMALL, n_epochs=8, learning_rate=0.3).fit(data.features, data.labels)


def test_params_round_trip():
    est = TransducerASR(**SMALL, learning_rate=0.1)
    params = est.get_params()
    assert params["learning_rate"] == 0.1
    twin = clone(est)
    assert twin.get_params() == params
    assert not hasattr(twin, "model_")


def test_unfitted_raises(data):
    with pytest.raises(NotFittedError):
        TransducerASR(**SMALL).predict(data.features)


def test_fit_is_deterministic(data, fitted):
    again = TransducerASR(**SMALL, n_epochs=8, learning_rate=0.3).fit(data.features, data.labels)
    assert again.model_ == fitted.model_
    assert again.predict(data.features) == fitted.predict(data.features)


def test_fit_lowers_loss(data, fitted):
    untrained = TransducerASR(**SMALL, n_epochs=0).fit(data.features, data.labels)
    assert fitted.loss(data.features, data.labels) < 0.7 * untrained.loss(data.features, data.labels)


def test_predict_shapes(data, fitted):
    preds = fitted.predict(data.features)
    assert len(preds) == len(data)
    assert all(isinstance(p, tuple) and all(1 <= k <= 5 for k in p) for p in preds)
    nbest = fitted.decode(data.features[:2], n_best=3)
    assert all(1 <= len(h) <= 3 for h in nbest)
    assert nbest[0][0].transcript == preds[0]


def test_score_matches_wer(data, fitted):
    w = fitted.wer(data.features, data.labels)
    assert fitted.score(data.features, data.labels) == pytest.approx(1 - w / 100)


def test_warm_start_continues(data, fitted):
    est = TransducerASR.from_model(fitted.model_, **SMALL, n_epochs=0, warm_start=True)
    est.fit(data.features, data.labels)
    assert est.model_ == fitted.model_
    est.set_params(n_epochs=1, learning_rate=0.05)
    est.fit(data.features, data.labels)
    moved = np.abs(est.model_.flat() - fitted.model_.flat()).max()
    assert 0 < moved < 1.0


def test_warm_start_rejects_new_shape(fitted, data):
    est = TransducerASR.from_model(fitted.model_, warm_start=True)
    est.set_params(enc_hidden=7)
    with pytest.raises(ValueError):
        est.fit(data.features, data.labels)


def test_multi_hypothesis_targets(data):
    y = [[lab, lab] for lab in data.labels]
    est = TransducerASR(**SMALL, n_epochs=1).fit(data.features, y)
    assert est.loss(data.features, y) == pytest.approx(2 * est.loss(data.features, data.labels))


@pytest.mark.parametrize("bad", [
    lambda d: ([np.ones((3, 5))] * len(d), d.labels),
    lambda d: (d.features, d.labels[:-1]),
    lambda d: (d.features, [(9,)] * len(d)),
    lambda d: (d.features, [(0, 1)] * len(d)),
    lambda d: ([np.full((2, 4), np.nan)] * len(d), d.labels),
])
def test_bad_input_rejected(data, bad):
    X, y = bad(data)
    with pytest.raises((ContractViolation, ValidationError)):
        TransducerASR(**SMALL, n_epochs=1).fit(X, y)
