"""Residual CNN mapping a ``(3, P_b, T)`` branch feature block to ``(1, P_b, T)``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, add, conv2d_same, instance_norm, leaky_relu

Params = dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, ...] = (16, 32, 64, 64, 64)
    kernel: tuple[int, int] = (5, 5)
    slope: float = 0.01
    eps: float = 1e-5
    in_channels: int = 3

    def __post_init__(self):
        if len(self.channels) < 1 or any(c < 1 for c in self.channels):
            raise ValueError("need at least one block with positive channel counts")
        if any(k % 2 == 0 for k in self.kernel):
            raise ValueError("kernel dimensions must be odd")

    @property
    def blocks(self) -> int:
        return len(self.channels)


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """He-normal conv weights (leaky gain), zero biases, unit/zero norm affine."""
    rng = np.random.default_rng(seed)
    kh, kw = cfg.kernel
    gain = 2.0 / (1.0 + cfg.slope ** 2)
    params: Params = {}

    def conv(name, c_out, c_in, k1, k2, std):
        params[f"{name}.w"] = Tensor(rng.normal(0.0, std, (c_out, c_in, k1, k2)), True, f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros(c_out), True, f"{name}.b")

    def norm(name, c):
        params[f"{name}.gamma"] = Tensor(np.ones(c), True, f"{name}.gamma")
        params[f"{name}.beta"] = Tensor(np.zeros(c), True, f"{name}.beta")

    c_in = cfg.in_channels
    for i, c in enumerate(cfg.channels):
        p = f"block{i}"
        conv(f"{p}.conv1", c, c_in, kh, kw, np.sqrt(gain / (c_in * kh * kw)))
        norm(f"{p}.norm1", c)
        conv(f"{p}.conv2", c, c, kh, kw, np.sqrt(gain / (c * kh * kw)))
        norm(f"{p}.norm2", c)
        if c != c_in:
            conv(f"{p}.skip", c, c_in, 1, 1, np.sqrt(1.0 / c_in))
        c_in = c
    conv("head", 1, c_in, 1, 1, np.sqrt(1.0 / c_in))
    return params


def zero_params(cfg: ModelConfig) -> Params:
    params = init_params(cfg, 0)
    for t in params.values():
        t.data[...] = 0.0
    return params


def model_forward(cfg: ModelConfig, params: Params, z) -> Tensor:
    """conv-IN-LReLU-conv-IN + skip, LReLU, per block; linear 1x1 head."""
    x = z if isinstance(z, Tensor) else Tensor(z)
    if x.data.ndim != 3 or x.shape[0] != cfg.in_channels:
        raise ValueError(f"expected input ({cfg.in_channels}, P, T), got {x.shape}")
    c_in = cfg.in_channels
    for i, c in enumerate(cfg.channels):
        p = f"block{i}"
        h = conv2d_same(x, params[f"{p}.conv1.w"], params[f"{p}.conv1.b"])
        h = instance_norm(h, params[f"{p}.norm1.gamma"], params[f"{p}.norm1.beta"], cfg.eps)
        h = leaky_relu(h, cfg.slope)
        h = conv2d_same(h, params[f"{p}.conv2.w"], params[f"{p}.conv2.b"])
        h = instance_norm(h, params[f"{p}.norm2.gamma"], params[f"{p}.norm2.beta"], cfg.eps)
        skip = x if c == c_in else conv2d_same(x, params[f"{p}.skip.w"], params[f"{p}.skip.b"])
        x = leaky_relu(add(h, skip), cfg.slope)
        c_in = c
    return conv2d_same(x, params["head.w"], params["head.b"])


def copy_params(params: Params) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def load_arrays(params: Params, arrays: dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        if arrays[k].shape != v.shape:
            raise ValueError(f"parameter {k}: shape {arrays[k].shape} != {v.shape}")
        v.data[...] = arrays[k]
