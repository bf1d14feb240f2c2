"""scikit-learn compatible front ends."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import graph as G
from . import tensor as T
from ._validation import ValidationError
from .data import save_dataset
from .model import GraphModel
from .pipeline import RunConfig, RunReport, _alpha_table, expensive_set, load_graph, run_search, run_train
from .precision import QPL_SCHEMES, LearnableBitwidth
from .schemes import PARAMETRIC_ALPHA, QuantConfig, SchemeId, optimize_alpha


class AutoQuantClassifier(ClassifierMixin, BaseEstimator):
    """MLP classifier trained with scheme search and learnable bitwidths.

    ``hidden`` lists the hidden-layer widths; input and output widths come
    from the data. Any other :class:`RunConfig` field can be passed as a
    keyword through ``config``.
    """

    def __init__(self, hidden=(32,), target_bits=3.0, qss_epochs=10, qpl_epochs=100, fp_epochs=0,
                 mode="coarse", exempt_first_last=False, seed=0, config=None):
        self.hidden = hidden
        self.target_bits = target_bits
        self.qss_epochs = qss_epochs
        self.qpl_epochs = qpl_epochs
        self.fp_epochs = fp_epochs
        self.mode = mode
        self.exempt_first_last = exempt_first_last
        self.seed = seed
        self.config = config

    def _run_config(self, n_features, n_classes, path):
        sizes = [n_features, *self.hidden, n_classes]
        extra = dict(self.config or {})
        return RunConfig(
            mlp=",".join(str(s) for s in sizes), dataset=str(path), n_samples=0,
            target_bits=self.target_bits, qss_epochs=self.qss_epochs, qpl_epochs=self.qpl_epochs,
            fp_epochs=self.fp_epochs, mode=self.mode, exempt_first_last=self.exempt_first_last,
            seed=self.seed, **extra,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValidationError("need at least two classes")
        y_idx = np.searchsorted(self.classes_, y)
        self.n_features_in_ = X.shape[1]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "train.txt"
            save_dataset(path, X, y_idx)
            cfg = self._run_config(X.shape[1], len(self.classes_), path)
            search = RunReport.loads(run_search(cfg).dumps())
            self.report_ = run_train(cfg, search)
        # the temporary file name would make otherwise identical fits differ
        self.report_.config["dataset"] = "<fit data>"
        self.model_ = _model_from_report(cfg, self.report_)
        self.policy_ = self.report_.bit_policy()
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.model_.forward(X).data

    def predict_proba(self, X):
        return T.softmax(T.Tensor(self.decision_function(X))).data

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


def _model_from_report(cfg: RunConfig, report: RunReport) -> GraphModel:
    """Rebuild the quantized network with the finalized integer policy."""
    g = load_graph(cfg)
    model = GraphModel(G.qag_transform(g, expensive_set(g, cfg)), seed=cfg.seed, lam=cfg.lam,
                       alpha_table=_alpha_table(cfg))
    model.load_state_dict(report.params)
    for e in report.policy:
        site = model.sites[e["name"]]
        scheme = SchemeId.parse(e["scheme"])
        site.config = QuantConfig(scheme, e["bits"], alpha_per_std=True)
        if scheme in QPL_SCHEMES:
            site.mode = "learnable"
            site.bitwidth = LearnableBitwidth(e["name"], scheme, e["bits"], e["count"], role=e["role"])
        else:
            site.mode = "fixed"
    return model


class SchemeQuantizer(TransformerMixin, BaseEstimator):
    """Quantize array values with one scheme.

    For ClipQ and PotQ ``fit`` picks the scale that minimizes the squared
    error on the training values (or uses ``alpha`` when given); the other
    schemes derive their scale from whatever they transform.
    """

    def __init__(self, scheme="clipq", bits=3, alpha=None):
        self.scheme = scheme
        self.bits = bits
        self.alpha = alpha

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_2d=False)
        scheme = SchemeId.parse(self.scheme)
        QuantConfig(scheme, self.bits)
        if scheme in PARAMETRIC_ALPHA and self.alpha is None:
            flat = X.reshape(-1)
            if flat.size >= 100_000:
                sample = flat
            else:
                sample = np.resize(flat, 100_000)
            self.alpha_ = optimize_alpha(scheme, self.bits, lambda rng, n: sample, n=sample.size)
        else:
            self.alpha_ = self.alpha
        self.n_features_in_ = X.shape[1] if X.ndim == 2 else 1
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64, ensure_2d=False)
        cfg = QuantConfig(SchemeId.parse(self.scheme), self.bits, alpha=self.alpha_)
        return cfg.apply(X)
