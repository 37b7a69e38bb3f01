"""Network input maps: backprojected intensities, overlap and foreshortening.

All maps are ``(P, T)`` arrays indexed by centerline node and frame.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .projector import CArmTrajectory, ProjectionStack, geometry_at
from .vessel_tree import VesselTree

logger = logging.getLogger(__name__)

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass(frozen=True)
class SphereSampling:
    k: int = 16

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be non-negative")

    def directions(self) -> np.ndarray:
        """Fibonacci-sphere unit vectors, shape ``(k, 3)``."""
        i = np.arange(self.k)
        z = 1.0 - (2.0 * i + 1.0) / max(self.k, 1)
        rho = np.sqrt(1.0 - z * z)
        phi = i * _GOLDEN_ANGLE
        return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])


def bilinear_sample(image: np.ndarray, cols: np.ndarray, rows: np.ndarray):
    """Bilinear samples at fractional pixel coordinates.

    Returns ``(values, inside)``; points outside ``[0, W-1] x [0, H-1]`` get 0.
    """
    H, W = image.shape
    inside = (cols >= 0) & (cols <= W - 1) & (rows >= 0) & (rows <= H - 1)
    c = np.where(inside, cols, 0.0)
    r = np.where(inside, rows, 0.0)
    c0 = np.clip(np.floor(c).astype(np.int64), 0, max(W - 2, 0))
    r0 = np.clip(np.floor(r).astype(np.int64), 0, max(H - 2, 0))
    c1 = np.minimum(c0 + 1, W - 1)
    r1 = np.minimum(r0 + 1, H - 1)
    fc = c - c0
    fr = r - r0
    val = (image[r0, c0] * (1 - fc) * (1 - fr) + image[r0, c1] * fc * (1 - fr)
           + image[r1, c0] * (1 - fc) * fr + image[r1, c1] * fc * fr)
    return np.where(inside, val, 0.0), inside


def backprojection_feature(stack: ProjectionStack | np.ndarray, traj: CArmTrajectory,
                           tree: VesselTree, sampling: SphereSampling = SphereSampling()) -> np.ndarray:
    """Mean bilinear sample of each node centre and its sphere points, per frame."""
    frames = stack.frames if isinstance(stack, ProjectionStack) else np.asarray(stack)
    if frames.shape != (traj.n_frames, traj.det_rows, traj.det_cols):
        raise ValueError("projection stack does not match the trajectory")
    offsets = np.vstack([np.zeros((1, 3)), sampling.directions()])
    points = tree.positions[:, None, :] + tree.radii[:, None, None] * offsets[None]
    out = np.zeros((tree.n_nodes, traj.n_frames))
    uncovered = 0
    for t in range(traj.n_frames):
        uv, _ = geometry_at(traj, t).project(points)
        vals, inside = bilinear_sample(frames[t], uv[..., 0], uv[..., 1])
        n = inside.sum(axis=1)
        out[:, t] = np.where(n > 0, vals.sum(axis=1) / np.maximum(n, 1), 0.0)
        uncovered += int(np.sum(n == 0))
    if uncovered:
        logger.warning("%d node/frame samples fell outside the detector", uncovered)
    return out


def circle_lens_area(r1, r2, d):
    """Intersection area of two circles with radii ``r1, r2`` and centre distance ``d``."""
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    d = np.asarray(d, dtype=float)
    rs = np.minimum(r1, r2)
    rl = np.maximum(r1, r2)
    disjoint = d >= rs + rl
    contained = d <= rl - rs
    partial = ~(disjoint | contained)
    dd = np.where(partial, d, 1.0)
    cos_s = np.clip((dd * dd + rs * rs - rl * rl) / (2.0 * dd * rs), -1.0, 1.0)
    cos_l = np.clip((dd * dd + rl * rl - rs * rs) / (2.0 * dd * rl), -1.0, 1.0)
    k = (-dd + rs + rl) * (dd + rs - rl) * (dd - rs + rl) * (dd + rs + rl)
    lens = rs * rs * np.arccos(cos_s) + rl * rl * np.arccos(cos_l) - 0.5 * np.sqrt(np.maximum(k, 0.0))
    area = np.where(disjoint, 0.0, np.where(contained, np.pi * rs * rs, lens))
    return area[()] if area.ndim == 0 else area


def projected_circles(tree: VesselTree, traj: CArmTrajectory, frame: int):
    """Detector centres (px) and radii (px) of each node's inscribed sphere."""
    geom = geometry_at(traj, frame)
    uv, depth = geom.project(tree.positions)
    if np.any(depth <= 0):
        raise ValueError("node at or behind the source")
    radius = tree.radii * traj.sdd / depth / traj.pixel_pitch
    return uv, radius


def _overlap_sums(uv: np.ndarray, radius: np.ndarray, exhaustive: bool) -> np.ndarray:
    P = len(radius)
    if exhaustive:
        i = np.repeat(np.arange(P), P)
        j = np.tile(np.arange(P), P)
    else:
        order = np.argsort(uv[:, 0], kind="stable")
        us = uv[order, 0]
        reach = radius + radius.max()
        lo = np.searchsorted(us, uv[:, 0] - reach, side="left")
        hi = np.searchsorted(us, uv[:, 0] + reach, side="right")
        counts = hi - lo
        i = np.repeat(np.arange(P), counts)
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        j = order[np.repeat(lo, counts) + offsets]
        du = uv[j, 0] - uv[i, 0]
        dv = uv[j, 1] - uv[i, 1]
        keep = np.sqrt(du * du + dv * dv) < radius[i] + radius[j]
        i, j = i[keep], j[keep]
        srt = np.lexsort((j, i))
        i, j = i[srt], j[srt]
    du = uv[j, 0] - uv[i, 0]
    dv = uv[j, 1] - uv[i, 1]
    o = circle_lens_area(radius[i], radius[j], np.sqrt(du * du + dv * dv))
    return np.bincount(i, o, minlength=P)


def overlap_ratios(uv: np.ndarray, radius: np.ndarray, exhaustive: bool = False) -> np.ndarray:
    """Summed intersection area of each circle with all circles, over its own area.

    The sum includes the circle itself, so an isolated circle scores exactly 1.
    """
    uv = np.asarray(uv, dtype=float)
    radius = np.asarray(radius, dtype=float)
    return _overlap_sums(uv, radius, exhaustive) / (np.pi * radius * radius)


def overlap_map(tree: VesselTree, traj: CArmTrajectory, exhaustive: bool = False) -> np.ndarray:
    """Per-node overlap ratio of the projected inscribed spheres, per frame."""
    out = np.empty((tree.n_nodes, traj.n_frames))
    for t in range(traj.n_frames):
        uv, radius = projected_circles(tree, traj, t)
        out[:, t] = overlap_ratios(uv, radius, exhaustive)
    return out


def foreshortening_angle(rays: np.ndarray, tangents: np.ndarray) -> np.ndarray:
    """Angle in ``[0, pi/2]`` between unit rays and unit tangents, sign-folded."""
    cos = np.abs(np.sum(np.asarray(rays) * np.asarray(tangents), axis=-1))
    return np.arccos(np.clip(cos, 0.0, 1.0))


def foreshortening_map(tree: VesselTree, traj: CArmTrajectory) -> np.ndarray:
    out = np.empty((tree.n_nodes, traj.n_frames))
    for t in range(traj.n_frames):
        geom = geometry_at(traj, t)
        rays = tree.positions - geom.source
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        out[:, t] = foreshortening_angle(rays, tree.tangents)
    return out


# --------------------------------------------------------------------------
# assembly
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureNorms:
    backprojection: float  # divides channel 0
    u_cap: float = 9.0
    angle_scale: float = math.pi / 2

    @classmethod
    def for_tree(cls, tree: VesselTree, mu_eff: float, u_cap: float = 9.0) -> "FeatureNorms":
        return cls(mu_eff * 2.0 * float(np.mean(tree.radii)), u_cap)


@dataclass(frozen=True, eq=False)
class FeatureTensor:
    values: np.ndarray  # (3, P, T)
    norms: FeatureNorms

    @property
    def backprojection(self) -> np.ndarray:
        return self.values[0]


def assemble(I: np.ndarray, U: np.ndarray, V: np.ndarray, norms: FeatureNorms) -> FeatureTensor:
    I, U, V = (np.asarray(x, dtype=float) for x in (I, U, V))
    if not (I.shape == U.shape == V.shape) or I.ndim != 2:
        raise ValueError(f"feature maps disagree in shape: {I.shape}, {U.shape}, {V.shape}")
    z = np.stack([
        I / norms.backprojection,
        np.clip((U - 1.0) / norms.u_cap, 0.0, 1.0),
        V / norms.angle_scale,
    ])
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite feature values")
    return FeatureTensor(z, norms)


def disassemble(features: FeatureTensor) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Undo the normalisation (exact unless the overlap channel was clipped)."""
    n = features.norms
    z = features.values
    return z[0] * n.backprojection, z[1] * n.u_cap + 1.0, z[2] * n.angle_scale


def compute_features(tree: VesselTree, stack: ProjectionStack, mu_eff: float,
                     sampling: SphereSampling = SphereSampling(), u_cap: float = 9.0) -> FeatureTensor:
    traj = stack.trajectory
    I = backprojection_feature(stack, traj, tree, sampling)
    U = overlap_map(tree, traj)
    V = foreshortening_map(tree, traj)
    return assemble(I, U, V, FeatureNorms.for_tree(tree, mu_eff, u_cap))
