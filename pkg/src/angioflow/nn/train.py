"""Branch-wise training with Adam and best-validation model selection."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import ModelConfig, Params, copy_params, init_params, load_arrays, model_forward
from .optim import AdamState, adam_step
from .tensor import mae_loss

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    lr_schedule: str = "constant"  # or "cosine" (decays to lr_min at the last epoch)
    lr_min: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant" or self.epochs == 1:
            return self.lr
        frac = epoch / (self.epochs - 1)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True, eq=False)
class BranchSample:
    z: np.ndarray  # (3, P_b, T)
    x: np.ndarray  # (P_b, T)
    case_id: str = ""
    geometry_id: str = ""
    split: str = "train"
    branch_id: int = -1

    def __post_init__(self):
        if self.z.ndim != 3 or self.x.shape != self.z.shape[1:]:
            raise ValueError(f"sample shapes disagree: z {self.z.shape}, x {self.x.shape}")


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val(self) -> float:
        return min(h[2] for h in self.history)


def check_splits(samples: Sequence[BranchSample]) -> None:
    """Every geometry must live in exactly one split."""
    owner: dict[str, str] = {}
    for s in samples:
        prev = owner.setdefault(s.geometry_id, s.split)
        if prev != s.split:
            raise ValueError(f"geometry {s.geometry_id!r} appears in both {prev!r} and {s.split!r}")


def predict(cfg: ModelConfig, params: Params, z: np.ndarray) -> np.ndarray:
    return model_forward(cfg, params, z).data[0]


def evaluate_mae(cfg: ModelConfig, params: Params, samples: Sequence[BranchSample]) -> float:
    """Point-weighted MAE over all samples."""
    total = 0.0
    count = 0
    for s in samples:
        total += float(np.abs(predict(cfg, params, s.z) - s.x).sum())
        count += s.x.size
    return total / count


def train(samples: Sequence[BranchSample], model_cfg: ModelConfig, cfg: TrainConfig,
          params: Params | None = None,
          on_epoch: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """One Adam step per branch sample (batch size 1), shuffled each epoch.

    Returns the parameters from the epoch with the lowest validation MAE.
    """
    check_splits(samples)
    train_set = [s for s in samples if s.split == "train"]
    val_set = [s for s in samples if s.split == "val"]
    if not train_set:
        raise ValueError("training split is empty")
    if not val_set:
        raise ValueError("validation split is empty")
    if params is None:
        params = init_params(model_cfg, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    result = TrainResult(copy_params(params))
    best = math.inf
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        abs_sum = 0.0
        count = 0
        for idx in rng.permutation(len(train_set)):
            s = train_set[idx]
            for p in params.values():
                p.zero_grad()
            loss = mae_loss(model_forward(model_cfg, params, s.z), s.x[None])
            loss.backward()
            adam_step(params, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            abs_sum += loss.item() * s.x.size
            count += s.x.size
        train_mae = abs_sum / count
        val_mae = evaluate_mae(model_cfg, params, val_set)
        result.history.append((epoch, train_mae, val_mae))
        if val_mae < best:
            best = val_mae
            result.params = copy_params(params)
            result.best_epoch = epoch
        logger.info("epoch %d  train %.5f  val %.5f  (%.1fs)", epoch, train_mae, val_mae,
                    time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch, train_mae, val_mae)
    return result


def overfit(z: np.ndarray, x: np.ndarray, model_cfg: ModelConfig, steps: int, lr: float = 1e-3,
            seed: int = 0, schedule: str = "constant") -> list[float]:
    """Fit a single sample; returns the loss before each step plus the final loss.

    ``schedule="cosine"`` anneals the step size from ``lr`` to zero over ``steps``.
    """
    params = init_params(model_cfg, seed)
    state = AdamState()
    sched = TrainConfig(epochs=steps, lr=lr, lr_schedule=schedule)
    losses = []
    for step in range(steps):
        for p in params.values():
            p.zero_grad()
        loss = mae_loss(model_forward(model_cfg, params, z), x[None])
        losses.append(loss.item())
        loss.backward()
        adam_step(params, state, sched.lr_at(step))
    losses.append(float(np.abs(predict(model_cfg, params, z) - x).mean()))
    return losses


def restore(model_cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> Params:
    params = init_params(model_cfg, 0)
    load_arrays(params, arrays)
    return params
