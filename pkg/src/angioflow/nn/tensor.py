"""Tiny reverse-mode autodiff over float64 numpy arrays.

Only the operations the reconstruction network needs are provided. Each op
records its parents and a closure that pushes the output gradient back.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # intermediate gradients are rebuilt on every call
        for node in order:
            if node._parents:
                node.grad = None
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return Tensor(a.data + b.data, _parents=(a, b), _backward=backward)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    C, H, W = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # C, H, W, kh, kw
    return win.transpose(0, 3, 4, 1, 2).reshape(C * kh * kw, H * W)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int], kh: int, kw: int) -> np.ndarray:
    C, H, W = shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((C, H + 2 * ph, W + 2 * pw))
    blocks = cols.reshape(C, kh, kw, H, W)
    for di in range(kh):
        for dj in range(kw):
            out[:, di:di + H, dj:dj + W] += blocks[:, di, dj]
    return out[:, ph:ph + H, pw:pw + W]


def conv2d_same(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """2D cross-correlation with zero 'same' padding; ``x`` is ``(C_in, H, W)``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError("conv2d_same expects x (C,H,W) and w (O,C,kh,kw)")
    C_out, C_in, kh, kw = w.shape
    if x.shape[0] != C_in:
        raise ValueError(f"conv2d_same: input has {x.shape[0]} channels, kernel expects {C_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel size must be odd")
    _, H, W = x.shape
    cols = _im2col(x.data, kh, kw)
    wm = w.data.reshape(C_out, -1)
    y = wm @ cols
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (C_out,):
            raise ValueError("bias shape mismatch")
        y += b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(C_out, H * W)
        if w.requires_grad:
            w._accumulate((g2 @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=1))
        if x.requires_grad:
            x._accumulate(_col2im(wm.T @ g2, x.shape, kh, kw))

    return Tensor(y.reshape(C_out, H, W), _parents=parents, _backward=backward)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over the spatial axes (biased variance)."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    C = x.shape[0]
    flat = x.data.reshape(C, -1)
    n = flat.shape[1]
    mu = flat.mean(axis=1, keepdims=True)
    xc = flat - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma.data[:, None] * xhat + beta.data[:, None]

    def backward(g):
        g2 = g.reshape(C, -1)
        if gamma.requires_grad:
            gamma._accumulate((g2 * xhat).sum(axis=1))
        if beta.requires_grad:
            beta._accumulate(g2.sum(axis=1))
        if x.requires_grad:
            gx = g2 * gamma.data[:, None]
            dx = inv / n * (n * gx - gx.sum(axis=1, keepdims=True)
                            - xhat * (gx * xhat).sum(axis=1, keepdims=True))
            x._accumulate(dx.reshape(x.shape))

    return Tensor(y.reshape(x.shape), _parents=(x, gamma, beta), _backward=backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    x = _as_tensor(x)
    pos = x.data >= 0

    def backward(g):
        x._accumulate(np.where(pos, g, slope * g))

    return Tensor(np.where(pos, x.data, slope * x.data), _parents=(x,), _backward=backward)


def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at zero residual is 0."""
    pred = _as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"mae_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target

    def backward(g):
        pred._accumulate(g * np.sign(diff) / diff.size)

    return Tensor(np.abs(diff).mean(), _parents=(pred,), _backward=backward)


def weighted_sum(x: Tensor, weights) -> Tensor:
    """``sum(x * weights)`` for a constant weight array (smooth probe loss)."""
    x = _as_tensor(x)
    weights = np.asarray(weights, dtype=np.float64)

    def backward(g):
        x._accumulate(g * weights)

    return Tensor(np.sum(x.data * weights), _parents=(x,), _backward=backward)
