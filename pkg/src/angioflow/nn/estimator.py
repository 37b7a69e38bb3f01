"""scikit-learn style wrapper around the branch-wise residual CNN."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .._validation import check_branch_inputs
from ..metrics import r_squared
from .model import ModelConfig
from .train import BranchSample, TrainConfig, predict, restore, train


class ConcentrationReconstructor(RegressorMixin, BaseEstimator):
    """Maps ``(3, P_b, T)`` branch feature blocks to ``(P_b, T)`` concentrations.

    ``fit`` takes a list of feature blocks and a list of targets of matching
    spatial shape; blocks may differ in length ``P_b`` and frame count ``T``.
    Model selection keeps the epoch with the lowest MAE on
    ``validation_data``; without it the training data is used for selection.

    Parameters
    ----------
    channels : tuple of int
        Output channels of each residual block.
    kernel : tuple of int
        Odd spatial kernel size of the block convolutions.
    slope : float
        Leaky ReLU negative slope.
    eps : float
        Instance-norm epsilon.
    epochs, learning_rate, beta1, beta2, adam_eps, lr_schedule, lr_min
        Adam / schedule settings, see :class:`TrainConfig`.
    random_state : int
        Seeds parameter initialisation and the per-epoch sample order.
    """

    def __init__(self, channels=(16, 32, 64, 64, 64), kernel=(5, 5), slope=0.01, eps=1e-5,
                 epochs=300, learning_rate=1e-3, beta1=0.9, beta2=0.999, adam_eps=1e-8,
                 lr_schedule="constant", lr_min=0.0, random_state=0):
        self.channels = channels
        self.kernel = kernel
        self.slope = slope
        self.eps = eps
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.lr_schedule = lr_schedule
        self.lr_min = lr_min
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(tuple(self.channels), tuple(self.kernel), self.slope, self.eps)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.learning_rate, self.beta1, self.beta2,
                           self.adam_eps, int(self.random_state), self.lr_schedule, self.lr_min)

    def fit(self, Z, X, validation_data=None):
        blocks, targets, _ = check_branch_inputs(Z, X)
        samples = [BranchSample(z, x, geometry_id="train", split="train") for z, x in zip(blocks, targets)]
        if validation_data is not None:
            vz, vx, _ = check_branch_inputs(*validation_data)
            samples += [BranchSample(z, x, geometry_id="val", split="val") for z, x in zip(vz, vx)]
        else:
            samples += [BranchSample(z, x, geometry_id="val", split="val") for z, x in zip(blocks, targets)]
        result = train(samples, self._model_config(), self._train_config())
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = 3
        return self

    @classmethod
    def from_params(cls, arrays: dict[str, np.ndarray], **kwargs) -> "ConcentrationReconstructor":
        est = cls(**kwargs)
        restore(est._model_config(), arrays)  # shape check
        est.params_ = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        est.history_ = []
        est.best_epoch_ = -1
        est.n_features_in_ = 3
        return est

    def predict(self, Z, clip: bool = False):
        """Predicted concentrations; ``clip`` restricts them to ``[0, 1]``."""
        check_is_fitted(self, "params_")
        blocks, _, single = check_branch_inputs(Z)
        cfg = self._model_config()
        params = restore(cfg, self.params_)
        out = [predict(cfg, params, z) for z in blocks]
        if clip:
            out = [np.clip(o, 0.0, 1.0) for o in out]
        return out[0] if single else out

    def score(self, Z, X, sample_weight=None):
        """Coefficient of determination over all points."""
        pred = self.predict(Z)
        _, targets, single = check_branch_inputs(Z, X)
        pred = [pred] if single else pred
        return r_squared(np.concatenate([t.ravel() for t in targets]),
                         np.concatenate([p.ravel() for p in pred]))
