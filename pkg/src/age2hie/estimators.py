"""Scikit-learn style estimators wrapping the staged training pipeline.

BrainAgeRegressor.fit runs age pretraining; HieOutcomeClassifier.fit runs
refine + finetune when given a pretrained extractor and falls back to the
equal-budget scratch baseline otherwise.  X is always a volumetric batch of
shape (n_samples, 2, D, H, W); standard 2-d tabular validation does not
apply, so the input checks live here instead of sklearn's validate helpers.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin

from age2hie.data import AGE_MAX, Dataset, Sample
from age2hie.models import ModelConfig
from age2hie.optim import (
    FINETUNE_EPOCHS,
    PRETRAIN_EPOCHS,
    REFINE_EPOCHS,
    finetune_schedule,
    pretrain_schedule,
    refine_schedule,
    scratch_schedule,
)
from age2hie.pipeline import (
    Checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    predict as predict_outcomes,
    pretrain,
    refine,
    finetune,
    train_scratch,
)
from age2hie.tensor import Tensor


def check_volume_batch(X) -> np.ndarray:
    """Validate (n_samples, 2, D, H, W) float input and return it as f32."""
    X = np.asarray(X)
    if X.ndim != 5:
        raise ValueError(
            f"X must be 5-d (n_samples, channels, D, H, W), got shape {X.shape}"
        )
    if X.shape[0] < 1:
        raise ValueError("X has no samples")
    if X.shape[1] != 2:
        raise ValueError(f"X must carry 2 channels, got {X.shape[1]}")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    return X.astype(np.float32, copy=False)


def check_age_targets(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"y has {y.shape[0]} targets for {n} samples")
    if not np.isfinite(y).all() or y.min() < 0 or y.max() > AGE_MAX:
        raise ValueError(f"age targets must be finite and within [0, {AGE_MAX}]")
    return y


def check_outcome_targets(y, n: int) -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"y has {y.shape[0]} targets for {n} samples")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("outcome targets must be 0 or 1")
    return y.astype(np.int64)


def _as_dataset(X: np.ndarray, y: np.ndarray, task: str, sites=None) -> Dataset:
    samples = []
    for i in range(X.shape[0]):
        site = sites[i] if sites is not None else "NONE"
        label = float(y[i]) if task == "age" else int(y[i])
        samples.append(Sample(f"x{i:05d}", X[i], label, site))
    return Dataset(task, samples, provenance="real")


class BrainAgeRegressor(RegressorMixin, BaseEstimator):
    """Age regression on volumetric batches via a 3D residual network.

    fit pretrains the full network with the MAE objective; the fitted
    checkpoint_ doubles as the transfer source for HieOutcomeClassifier.
    """

    def __init__(self, variant="resnet18", width=64, epochs=PRETRAIN_EPOCHS,
                 batch_size=16, seed=0):
        self.variant = variant
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X = check_volume_batch(X)
        y = check_age_targets(y, X.shape[0])
        config = ModelConfig(variant=self.variant, in_channels=2, out_dim=1,
                             width=self.width)
        data = _as_dataset(X, y, "age")
        self.checkpoint_ = pretrain(data, config,
                                    pretrain_schedule(self.epochs),
                                    seed=self.seed, batch=self.batch_size)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X):
        if not hasattr(self, "checkpoint_"):
            raise ValueError("BrainAgeRegressor is not fitted yet; call fit first")
        X = check_volume_batch(X)
        model = model_from_checkpoint(self.checkpoint_)
        out = np.empty(X.shape[0], dtype=np.float64)
        for start in range(0, X.shape[0], self.batch_size):
            chunk = Tensor(X[start:start + self.batch_size])
            out[start:start + chunk.shape[0]] = model.forward(
                chunk, training=False).data.ravel()
        return out


class HieOutcomeClassifier(ClassifierMixin, BaseEstimator):
    """Binary outcome classification, with or without an age-pretrained core.

    pretrained may be a Checkpoint, a path to an A2H1 file, or a fitted
    BrainAgeRegressor; when it is None the classifier trains from scratch on
    the combined refine+finetune epoch budget.
    """

    def __init__(self, variant="resnet18", width=64,
                 refine_epochs=REFINE_EPOCHS, finetune_epochs=FINETUNE_EPOCHS,
                 batch_size=16, seed=0, pretrained=None):
        self.variant = variant
        self.width = width
        self.refine_epochs = refine_epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.seed = seed
        self.pretrained = pretrained

    def _resolve_pretrained(self):
        src = self.pretrained
        if src is None:
            return None
        if isinstance(src, BrainAgeRegressor):
            if not hasattr(src, "checkpoint_"):
                raise ValueError("pretrained BrainAgeRegressor is not fitted")
            return src.checkpoint_
        if isinstance(src, Checkpoint):
            return src
        return load_checkpoint(src)

    def fit(self, X, y):
        X = check_volume_batch(X)
        y = check_outcome_targets(y, X.shape[0])
        data = _as_dataset(X, y, "outcome")
        source = self._resolve_pretrained()
        if source is not None:
            ck = refine(source, data, refine_schedule(self.refine_epochs),
                        seed=self.seed, batch=self.batch_size)
            ck = finetune(ck, data, finetune_schedule(self.finetune_epochs),
                          seed=self.seed, batch=self.batch_size)
        else:
            config = ModelConfig(variant=self.variant, in_channels=2,
                                 out_dim=2, width=self.width)
            ck = train_scratch(data, config,
                               scratch_schedule(self.refine_epochs,
                                                self.finetune_epochs),
                               seed=self.seed, batch=self.batch_size)
        self.checkpoint_ = ck
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _predict_rows(self, X):
        if not hasattr(self, "checkpoint_"):
            raise ValueError("HieOutcomeClassifier is not fitted yet; call fit first")
        X = check_volume_batch(X)
        dummy = np.zeros(X.shape[0], dtype=np.int64)
        data = _as_dataset(X, dummy, "outcome")
        return predict_outcomes(self.checkpoint_, data, batch=self.batch_size)

    def predict(self, X):
        return np.array([cls for _, cls, _ in self._predict_rows(X)],
                        dtype=np.int64)

    def predict_proba(self, X):
        p1 = np.array([p for _, _, p in self._predict_rows(X)], dtype=np.float64)
        return np.column_stack([1.0 - p1, p1])
