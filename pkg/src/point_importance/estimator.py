"""scikit-learn style wrapper around the importance pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import SceneRecord
from .model import (
    ModelConfig,
    ModelParams,
    forward_baseline,
    forward_point,
    load_checkpoint,
    save_checkpoint,
    select_most_important,
)
from .train import TrainConfig, evaluate_scores, train
from .validation import check_scenes


class _Labelled:
    __slots__ = ("features", "global_feature", "labels", "scene_id")

    def __init__(self, scene, labels, k):
        self.features = scene.features
        self.global_feature = scene.global_feature
        self.labels = labels
        self.scene_id = str(k)


class ImportanceRanker(BaseEstimator):
    """Ranks the persons of each scene by importance.

    ``X`` is a sequence of scenes (see :mod:`point_importance.validation`),
    ``y`` an optional sequence of 0/1 label vectors, one per scene. With
    ``use_relation=False`` the relation modules are bypassed and the
    classifier sees raw person features (the relation-free baseline).

    Parameters mirror :class:`~point_importance.model.ModelConfig` and
    :class:`~point_importance.train.TrainConfig`.
    """

    def __init__(
        self,
        r=4,
        n_modules=1,
        fusion="prior_importance",
        attention="additive",
        normalization="outgoing",
        include_self=True,
        hidden=None,
        use_relation=True,
        epochs=50,
        lr=0.01,
        momentum=0.9,
        batch_size=8,
        random_state=0,
    ):
        self.r = r
        self.n_modules = n_modules
        self.fusion = fusion
        self.attention = attention
        self.normalization = normalization
        self.include_self = include_self
        self.hidden = hidden
        self.use_relation = use_relation
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.random_state = random_state

    def _model_config(self, d_f):
        return ModelConfig(
            d_f=d_f,
            r=self.r,
            n_modules=self.n_modules,
            fusion=self.fusion,
            attention=self.attention,
            normalization=self.normalization,
            include_self=self.include_self,
            hidden=self.hidden,
        )

    def fit(self, X, y=None):
        scenes, labels = check_scenes(X, y, require_labels=True)
        seed = 0 if self.random_state is None else int(self.random_state)
        self.config_ = self._model_config(scenes[0].d_f)
        self.params_ = ModelParams.initialize(self.config_, seed=seed)
        corpus = [_Labelled(s, lab, k) for k, (s, lab) in enumerate(zip(scenes, labels))]
        tc = TrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            momentum=self.momentum,
            batch_size=self.batch_size,
            seed=seed,
            baseline=not self.use_relation,
        )
        self.loss_curve_ = train(corpus, self.params_, self.config_, tc).loss_curve
        self.n_features_in_ = self.config_.d_f
        return self

    def _scores(self, X):
        check_is_fitted(self, "params_")
        scenes, _ = check_scenes(X)
        if scenes[0].d_f != self.n_features_in_:
            raise ValueError(f"X has d_f={scenes[0].d_f}, the estimator was fitted with d_f={self.n_features_in_}")
        fwd = forward_point if self.use_relation else forward_baseline
        return [fwd(s, self.params_, self.config_) for s in scenes]

    def decision_function(self, X):
        """Importance point of every person, one array per scene."""
        return self._scores(X)

    def predict_proba(self, X):
        """Per-scene ``(N, 2)`` arrays of [non-important, important] probabilities."""
        return [np.column_stack([1.0 - p, p]) for p in self._scores(X)]

    def predict(self, X):
        """Index of the most important person in each scene."""
        return np.array([select_most_important(p) for p in self._scores(X)], dtype=int)

    def score(self, X, y=None):
        """Mean average precision over scenes, as a fraction in [0, 1]."""
        scenes, labels = check_scenes(X, y, require_labels=True)
        corpus = [_Labelled(s, lab, k) for k, (s, lab) in enumerate(zip(scenes, labels))]
        return evaluate_scores(corpus, self._scores(scenes)).mAP / 100.0

    def save(self, path):
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.config_, {"estimator": self.get_params()})

    @classmethod
    def load(cls, path):
        params, config, meta = load_checkpoint(path)
        est = cls(**meta.get("estimator", {}))
        est.config_, est.params_, est.n_features_in_ = config, params, config.d_f
        return est


__all__ = ["ImportanceRanker", "SceneRecord"]
