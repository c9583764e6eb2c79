"""scikit-learn style wrappers: a zero-shot classifier plus attack and defense transformers.

Images may be passed as ``[N, C, W, H]`` arrays or flattened ``[N, C*W*H]``
rows together with ``image_shape``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .attacks import AttackConfig, run_attack
from .defenses import CounterattackConfig, defended_images, ttc_defend_batch
from .model import Architecture, DualEncoder, TrainConfig, train_clean
from .utils import check_images


def _as_images(X, image_shape=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if image_shape is None:
        if X.ndim != 4:
            raise ValueError("pass image_shape for flattened inputs, or [N, C, W, H] arrays")
        image_shape = X.shape[1:]
    batch, _ = check_images(X, tuple(image_shape), allow_single=False)
    return batch


class ZeroShotClassifier(ClassifierMixin, BaseEstimator):
    """Cosine-score classifier over a trainable class-embedding table."""

    def __init__(self, hidden=256, embed_dim=64, depth=1, logit_scale=10.0, activation="relu",
                 learning_rate=0.02, epochs=30, batch_size=32, random_state=0, image_shape=None):
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.depth = depth
        self.logit_scale = logit_scale
        self.activation = activation
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.image_shape = image_shape

    def fit(self, X, y):
        X = _as_images(X, self.image_shape)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        C, W, H = X.shape[1:]
        arch = Architecture(C, W, H, self.hidden, self.embed_dim, len(self.classes_), depth=self.depth)
        seed = int(self.random_state or 0)
        m = DualEncoder.init(arch, seed=seed, logit_scale=self.logit_scale)
        m.activation = self.activation
        cfg = TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size, seed=seed)
        result = train_clean(m, X, codes, cfg)
        self.model_ = result.model
        self.loss_curve_ = result.loss_curve
        self.n_features_in_ = C * W * H
        return self

    @classmethod
    def from_model(cls, model: DualEncoder, classes=None) -> "ZeroShotClassifier":
        """Wrap an already trained encoder."""
        a = model.arch
        est = cls(hidden=a.hidden, embed_dim=a.embed_dim, depth=a.depth, logit_scale=model.logit_scale,
                  activation=model.activation, image_shape=a.image_shape)
        est.model_ = model
        est.classes_ = np.arange(a.n_classes) if classes is None else np.asarray(classes)
        est.n_features_in_ = a.n_pixels
        est.loss_curve_ = []
        return est

    def _images(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return _as_images(X, self.model_.arch.image_shape)

    def decision_function(self, X) -> np.ndarray:
        return self.model_.scores(self._images(X))

    def predict_proba(self, X) -> np.ndarray:
        return self.model_.predict_proba(self._images(X))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def encode(self, X) -> np.ndarray:
        return self.model_.embed(self._images(X))

    def _codes(self, y) -> np.ndarray:
        y = np.asarray(y)
        codes = np.searchsorted(self.classes_, y)
        if np.any(codes >= len(self.classes_)) or np.any(self.classes_[np.minimum(codes, len(self.classes_) - 1)] != y):
            raise ValueError("y contains labels unseen during fit")
        return codes


class AttackTransformer(TransformerMixin, BaseEstimator):
    """Replace images by adversarial versions crafted against ``estimator``.

    ``transform(X, y)`` attacks the true labels; without ``y`` the current
    predictions are attacked.
    """

    def __init__(self, estimator=None, method="pgd_ce", epsilon=1 / 255, alpha=1 / 1020, steps=10,
                 random_start=False, random_state=0):
        self.estimator = estimator
        self.method = method
        self.epsilon = epsilon
        self.alpha = alpha
        self.steps = steps
        self.random_start = random_start
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.estimator is None:
            raise ValueError("AttackTransformer needs a fitted estimator")
        check_is_fitted(self.estimator, "model_")
        self.config_ = AttackConfig(method=self.method, epsilon=self.epsilon, alpha=self.alpha, steps=self.steps,
                                    random_start=self.random_start, seed=int(self.random_state or 0))
        return self

    def transform(self, X, y=None):
        check_is_fitted(self, "config_")
        est = self.estimator
        images = est._images(X)
        codes = est._codes(y) if y is not None else np.argmax(est.model_.scores(images), axis=1)
        return run_attack(est.model_, images, codes, self.config_)

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y)


class CounterattackTransformer(TransformerMixin, BaseEstimator):
    """Apply the tau-thresholded weighted counterattack to every image.

    ``tau_estimator`` computes the halt statistic (defaults to ``estimator``).
    After ``transform`` the fitted attributes ``tau_`` and ``halted_`` describe
    the last batch.
    """

    def __init__(self, estimator=None, tau_estimator=None, epsilon=4 / 255, steps=2, alpha=None, tau_thres=0.2,
                 beta=2.0, use_sign=True, random_state=0):
        self.estimator = estimator
        self.tau_estimator = tau_estimator
        self.epsilon = epsilon
        self.steps = steps
        self.alpha = alpha
        self.tau_thres = tau_thres
        self.beta = beta
        self.use_sign = use_sign
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.estimator is None:
            raise ValueError("CounterattackTransformer needs a fitted estimator")
        check_is_fitted(self.estimator, "model_")
        self.config_ = CounterattackConfig(epsilon=self.epsilon, alpha=self.alpha, steps=self.steps,
                                           tau_thres=self.tau_thres, beta=self.beta, seed=int(self.random_state or 0),
                                           use_sign=self.use_sign)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        est = self.estimator
        probe = self.tau_estimator if self.tau_estimator is not None else est
        images = est._images(X)
        out = ttc_defend_batch(est.model_, probe.model_, images, self.config_)
        self.tau_ = out.tau
        self.halted_ = out.halted
        return defended_images(images, out.delta_ttc)
