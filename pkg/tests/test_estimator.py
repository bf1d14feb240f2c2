import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from autoquant import AutoQuantClassifier, SchemeQuantizer
from autoquant._validation import ValidationError
from autoquant.data import blobs, split
from autoquant.schemes import QuantConfig

FAST = dict(hidden=(16,), qss_epochs=2, qpl_epochs=5, fp_epochs=0, seed=1)


@pytest.fixture(scope="module")
def fitted():
    X, y = blobs(600, separation=5.0, seed=3)
    labels = np.array(["neg", "pos"])[y]
    return AutoQuantClassifier(**FAST).fit(X, labels), X, labels


class TestClassifier:
    def test_fit_predict(self, fitted):
        clf, X, y = fitted
        assert set(clf.classes_) == {"neg", "pos"} and clf.n_features_in_ == 2
        assert np.mean(clf.predict(X) == y) > 0.9
        proba = clf.predict_proba(X[:5])
        np.testing.assert_allclose(proba.sum(axis=1), 1, rtol=1e-5)

    def test_model_reproduces_report_accuracy(self, fitted):
        clf, X, y = fitted
        idx = np.searchsorted(clf.classes_, y)
        _, X_te, _, y_te = split(X.astype(np.float32), idx, clf.seed)
        assert np.mean(np.argmax(clf.decision_function(X_te), axis=1) == y_te) == pytest.approx(clf.report_.accuracy)

    def test_policy_is_integer(self, fitted):
        clf, *_ = fitted
        assert all(float(e.bits).is_integer() for e in clf.policy_.entries)
        assert clf.report_.stage == "complete"

    def test_params_and_clone(self):
        clf = AutoQuantClassifier(**FAST)
        assert clf.get_params()["hidden"] == (16,)
        c = clone(clf.set_params(target_bits=4.0))
        assert c.target_bits == 4.0 and not hasattr(c, "model_")

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            AutoQuantClassifier().predict(np.zeros((1, 2)))

    def test_errors(self, fitted):
        clf, *_ = fitted
        with pytest.raises(ValidationError):
            clf.predict(np.zeros((2, 3)))
        with pytest.raises(ValidationError):
            AutoQuantClassifier(**FAST).fit(np.zeros((4, 2)), np.zeros(4))

    def test_deterministic(self):
        X, y = blobs(300, seed=5)
        a = AutoQuantClassifier(**FAST).fit(X, y).report_.dumps()
        assert a == AutoQuantClassifier(**FAST).fit(X, y).report_.dumps()


class TestSchemeQuantizer:
    def test_fit_alpha_for_clipq(self, rng):
        x = rng.standard_normal((2000, 3))
        q = SchemeQuantizer("clipq", 3).fit(x)
        assert 0.5 < q.alpha_ < 0.7  # near the 3-bit optimum 0.587 for N(0, 1)
        out = q.transform(x)
        assert out.shape == x.shape and np.unique(out).size <= 8

    def test_fixed_alpha_and_non_parametric(self, rng):
        x = rng.standard_normal(100)
        q = SchemeQuantizer("clipq", 3, alpha=0.5).fit(x)
        np.testing.assert_array_equal(q.transform(x), QuantConfig("clipq", 3, alpha=0.5).apply(x))
        z = SchemeQuantizer("zoomq", 2).fit_transform(x)
        assert np.unique(z).size <= 4

    def test_rejects_bad_bits(self):
        with pytest.raises(ValidationError):
            SchemeQuantizer("potq", 6).fit(np.ones(3))
