"""Scikit-learn style estimators wrapping the adaptation machinery.

``MlpClassifier`` is the supervised source model (fit / predict). The
``ContinualAdapter`` wraps a fitted source model and consumes unlabeled
batches through ``partial_fit``, which performs one online adaptation step;
``predict`` runs the full gated inference pipeline without updating
anything. Both follow the get_params/set_params contract so they compose
with pipelines, cloning and grid search.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .adapters import AdaptedModel, ScalePair
from .gating import GateConfig, gate_batch
from .layers import MlpModel, hard_cross_entropy, hard_cross_entropy_grad, softmax
from .optim import Adam
from .trainer import AugmentConfig, TeacherStudent, adapt_step
from .validation import as_matrix


class MlpClassifier(BaseEstimator, ClassifierMixin):
    """Dense ReLU network classifier trained with Adam on hard labels.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int, widths of the hidden layers.
    epochs : int, passes over the training set.
    batch_size : int, minibatch size.
    learning_rate : float, Adam step size.
    dropout_rate : float, stored on the model for stochastic inference
        downstream; training itself is deterministic.
    random_state : int, seed for init and shuffling.

    Attributes
    ----------
    model_ : the fitted network.
    classes_ : sorted class labels seen in fit.
    loss_curve_ : mean training loss per epoch.
    """

    def __init__(
        self,
        hidden_layer_sizes=(64, 64),
        epochs=30,
        batch_size=64,
        learning_rate=1e-3,
        dropout_rate=0.0,
        random_state=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dropout_rate = dropout_rate
        self.random_state = random_state

    def fit(self, X, y):
        X = as_matrix(np.atleast_2d(X), "X")
        y = np.asarray(y).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y disagree on sample count")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        rng = np.random.Generator(np.random.PCG64(self.random_state))
        model = MlpModel.init(
            X.shape[1],
            tuple(self.hidden_layer_sizes),
            len(self.classes_),
            rng,
            dropout_rate=self.dropout_rate,
        )
        opt = Adam(model.parameters(), lr=self.learning_rate)
        n = X.shape[0]
        self.loss_curve_ = []
        for _ in range(self.epochs):
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                probs = softmax(model.forward(X[idx]))
                losses.append(hard_cross_entropy(y_idx[idx], probs))
                model.backward(hard_cross_entropy_grad(y_idx[idx], probs))
                opt.step(model.gradients())
                model.zero_grad()
            loss = float(np.mean(losses)) if losses else float("nan")
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged (loss {loss})")
            self.loss_curve_.append(loss)
        self.model_ = model
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(as_matrix(np.atleast_2d(X), "X"))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class ContinualAdapter(BaseEstimator, ClassifierMixin):
    """Online unlabeled adaptation of a fitted source classifier.

    Attaches the dual-rank branches to a copy of the source network, builds
    the teacher-student pair, and then treats each ``partial_fit(X)`` call
    as one arriving batch: gate, pseudo-label, consistency step, EMA.
    ``predict`` runs gated inference on the current student with no side
    effects on the weights.

    Parameters
    ----------
    source : fitted :class:`MlpClassifier` (or a bare ``MlpModel``).
    low_rank, high_rank : bottleneck widths of the two branches.
    alpha : teacher EMA coefficient.
    learning_rate : Adam step size for the adapter weights.
    gate_mode : "normal", "inverted" or "fixed".
    gate_passes, gate_threshold, gate_dropout : uncertainty gate knobs.
    fixed_high, fixed_low : scales used when ``gate_mode="fixed"``.
    augment_kind, augment_sigma : teacher-side input perturbation.
    adapter_init : "zero_out_proj" (source-equivalent start) or "gaussian".
    random_state : int, seed for init, gating and augmentation.
    """

    def __init__(
        self,
        source=None,
        low_rank=1,
        high_rank=128,
        alpha=0.99,
        learning_rate=5e-3,
        gate_mode="normal",
        gate_passes=5,
        gate_threshold=0.2,
        gate_dropout=0.25,
        fixed_high=1.0,
        fixed_low=1.0,
        augment_kind="gaussian_jitter",
        augment_sigma=0.05,
        adapter_init="zero_out_proj",
        low_gain=2.0,
        random_state=0,
    ):
        self.source = source
        self.low_rank = low_rank
        self.high_rank = high_rank
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.gate_mode = gate_mode
        self.gate_passes = gate_passes
        self.gate_threshold = gate_threshold
        self.gate_dropout = gate_dropout
        self.fixed_high = fixed_high
        self.fixed_low = fixed_low
        self.augment_kind = augment_kind
        self.augment_sigma = augment_sigma
        self.adapter_init = adapter_init
        self.low_gain = low_gain
        self.random_state = random_state

    def _source_model(self) -> MlpModel:
        if isinstance(self.source, MlpModel):
            return self.source
        if isinstance(self.source, MlpClassifier):
            check_is_fitted(self.source, "model_")
            return self.source.model_
        raise ValueError("source must be a fitted MlpClassifier or an MlpModel")

    def fit(self, X=None, y=None):
        """Initialize the adapted pair from the source model; X and y are unused."""
        source = self._source_model()
        rng = np.random.Generator(np.random.PCG64(self.random_state))
        self.pair_ = TeacherStudent.from_source(
            source,
            self.low_rank,
            self.high_rank,
            rng,
            alpha=self.alpha,
            init=self.adapter_init,
            low_gain=self.low_gain,
        )
        self.gate_config_ = GateConfig(
            passes=self.gate_passes,
            threshold=self.gate_threshold,
            dropout_rate=self.gate_dropout,
            mode=self.gate_mode,
            fixed_high=self.fixed_high,
            fixed_low=self.fixed_low,
        )
        self.augment_config_ = AugmentConfig(kind=self.augment_kind, sigma=self.augment_sigma)
        self.optimizer_ = Adam(self.pair_.student.adapter_parameters(), lr=self.learning_rate)
        self._rng = rng
        if isinstance(self.source, MlpClassifier):
            self.classes_ = self.source.classes_
        else:
            self.classes_ = np.arange(source.class_count)
        self.n_features_in_ = source.dim_in
        return self

    def partial_fit(self, X, y=None):
        """Adapt on one unlabeled batch; stores the outcome in ``last_outcome_``."""
        check_is_fitted(self, "pair_")
        self.last_outcome_ = adapt_step(
            self.pair_,
            as_matrix(np.atleast_2d(X), "X"),
            self.gate_config_,
            self.optimizer_,
            self.augment_config_,
            self._rng,
        )
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "pair_")
        X = as_matrix(np.atleast_2d(X), "X")
        _, scales = gate_batch(self.pair_.teacher, X, self.gate_config_, self._rng)
        return softmax(self.pair_.student.forward(X, scales))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def student_model(self) -> AdaptedModel:
        check_is_fitted(self, "pair_")
        return self.pair_.student

    def folded_model(self, scale_high: float = 1.0, scale_low: float = 1.0) -> MlpModel:
        """Collapse the student's branches into a plain network at fixed scales."""
        check_is_fitted(self, "pair_")
        return self.pair_.student.fold(ScalePair(scale_high, scale_low))
