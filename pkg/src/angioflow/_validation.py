"""Input checks shared by the estimator and the pipeline."""

from __future__ import annotations

import numpy as np


def check_feature_block(z, n_channels: int = 3) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or z.shape[0] != n_channels:
        raise ValueError(f"expected a ({n_channels}, P, T) feature block, got shape {z.shape}")
    if z.shape[1] < 1 or z.shape[2] < 1:
        raise ValueError("feature block has an empty axis")
    if not np.all(np.isfinite(z)):
        raise ValueError("feature block contains non-finite values")
    return z


def check_branch_inputs(Z, X=None, n_channels: int = 3):
    """Normalise ``Z`` (one block or a sequence of blocks) and matching targets.

    Returns ``(blocks, targets, single)`` where ``single`` tells whether a lone
    block was passed.
    """
    single = isinstance(Z, np.ndarray) and Z.ndim == 3
    blocks = [check_feature_block(Z, n_channels)] if single else [check_feature_block(z, n_channels) for z in Z]
    if not blocks:
        raise ValueError("no feature blocks given")
    if X is None:
        return blocks, None, single
    targets = [np.asarray(X, dtype=np.float64)] if single else [np.asarray(x, dtype=np.float64) for x in X]
    if len(targets) != len(blocks):
        raise ValueError(f"{len(blocks)} feature blocks but {len(targets)} targets")
    for z, x in zip(blocks, targets):
        if x.shape == (1,) + z.shape[1:]:
            continue
        if x.shape != z.shape[1:]:
            raise ValueError(f"target shape {x.shape} does not match feature block {z.shape}")
    targets = [x.reshape(z.shape[1:]) for z, x in zip(blocks, targets)]
    return blocks, targets, single


def check_consistent_case(n_nodes: int, n_frames: int, **arrays) -> None:
    """Cross-check the P and T axes of a case's arrays (``X``, ``Y``, ``Z``...)."""
    for name, (arr, p_axis, t_axis) in arrays.items():
        shape = np.shape(arr)
        if p_axis is not None and shape[p_axis] != n_nodes:
            raise ValueError(f"{name}: {shape[p_axis]} nodes, expected {n_nodes}")
        if shape[t_axis] != n_frames:
            raise ValueError(f"{name}: {shape[t_axis]} frames, expected {n_frames}")
