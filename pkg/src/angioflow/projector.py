"""Cone-beam C-arm geometry and monoenergetic Beer-Lambert forward projection.

World frame: isocenter at the origin, ``z`` is the cranio-caudal axis. At
``alpha = beta = 0`` the source sits at ``(sid, 0, 0)`` and the detector
plane is ``x = sid - sdd``; detector columns run along ``+y`` and rows
along ``-z``. The gantry pose is ``R_z(alpha) @ R_tilt(beta)``, i.e. the tilt
is about the detector's horizontal axis, which turns with the primary angle.

Vessels are modelled as uncapped cylinders between consecutive centerline
nodes; projection images are stored as line integrals ``g = -ln(I / I0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .hemo import ConcentrationMap
from .vessel_tree import VesselTree


@dataclass(frozen=True)
class CArmTrajectory:
    alpha0: float = 0.0  # deg
    beta: float = 0.0  # deg
    delta_alpha: float = 0.85  # deg per frame
    frame_rate: float = 60.0
    n_frames: int = 1
    sid: float = 750.0  # mm
    sdd: float = 1200.0  # mm
    det_rows: int = 256
    det_cols: int = 256
    pixel_pitch: float = 1.0  # mm, at the detector

    def __post_init__(self):
        if not self.sdd > self.sid > 0:
            raise ValueError("require sdd > sid > 0")
        if self.pixel_pitch <= 0:
            raise ValueError("pixel pitch must be positive")
        if self.n_frames < 1 or self.det_rows < 1 or self.det_cols < 1:
            raise ValueError("frame and detector counts must be positive")

    @property
    def magnification(self) -> float:
        return self.sdd / self.sid

    def alpha(self, frame: int) -> float:
        return self.alpha0 + frame * self.delta_alpha


@dataclass(frozen=True, eq=False)
class ProjectionGeometry:
    source: np.ndarray
    detector_center: np.ndarray
    row_axis: np.ndarray
    col_axis: np.ndarray
    normal: np.ndarray  # unit vector from source towards isocenter
    matrix: np.ndarray  # 3x4, world -> homogeneous (col, row, 1)
    sdd: float
    pixel_pitch: float
    shape: tuple[int, int]

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates ``(col, row)`` and source depth along the normal."""
        pts = np.asarray(points, dtype=float)
        d = pts - self.source
        depth = d @ self.normal
        h = pts @ self.matrix[:, :3].T + self.matrix[:, 3]
        return h[..., :2] / h[..., 2:3], depth

    def pixel_positions(self) -> np.ndarray:
        H, W = self.shape
        cols = (np.arange(W) - (W - 1) / 2.0) * self.pixel_pitch
        rows = (np.arange(H) - (H - 1) / 2.0) * self.pixel_pitch
        return (self.detector_center
                + rows[:, None, None] * self.row_axis
                + cols[None, :, None] * self.col_axis)


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _tilt(b):
    c, s = math.cos(b), math.sin(b)
    # maps +x towards +z for positive tilt
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def rotation_z(deg: float) -> np.ndarray:
    return _rz(math.radians(deg))


def geometry_at(traj: CArmTrajectory, frame: int) -> ProjectionGeometry:
    if not 0 <= frame < traj.n_frames:
        raise IndexError(f"frame {frame} outside [0, {traj.n_frames})")
    pose = _rz(math.radians(traj.alpha(frame))) @ _tilt(math.radians(traj.beta))
    source = pose @ np.array([traj.sid, 0.0, 0.0])
    normal = pose @ np.array([-1.0, 0.0, 0.0])
    col_axis = pose @ np.array([0.0, 1.0, 0.0])
    row_axis = pose @ np.array([0.0, 0.0, -1.0])
    det_center = source + traj.sdd * normal
    H, W = traj.det_rows, traj.det_cols
    f = traj.sdd / traj.pixel_pitch
    r0 = f * col_axis + (W - 1) / 2.0 * normal
    r1 = f * row_axis + (H - 1) / 2.0 * normal
    matrix = np.array([
        [*r0, -r0 @ source],
        [*r1, -r1 @ source],
        [*normal, -normal @ source],
    ])
    return ProjectionGeometry(source, det_center, row_axis, col_axis, normal, matrix,
                              traj.sdd, traj.pixel_pitch, (H, W))


# --------------------------------------------------------------------------
# attenuation
# --------------------------------------------------------------------------

def ca_mass_attenuation(w_ip, mu_rho_ip, mu_rho_w):
    """Mass attenuation of the contrast solution as an iopromide/water mixture."""
    if not 0.0 <= w_ip <= 1.0:
        raise ValueError("weight fraction must lie in [0, 1]")
    return w_ip * mu_rho_ip + (1.0 - w_ip) * mu_rho_w


@dataclass(frozen=True)
class AttenuationModel:
    """Monoenergetic attenuation of pure contrast agent.

    The coefficient defaults are placeholders (roughly 60 keV, iopromide
    623 mg/ml in a 1.33 g/ml solution); they scale projections only and
    never touch the ground truth.
    """

    w_ip: float = 0.469
    mu_rho_ip: float = 3.25  # cm^2/g, placeholder
    mu_rho_w: float = 0.206  # cm^2/g, placeholder
    rho_ca: float = 1.328  # g/ml
    noise_sigma: float = 0.0
    mu_override: float | None = None  # 1/mm, bypasses the mixture rule

    @property
    def mu_eff(self) -> float:
        """Linear attenuation of pure contrast in 1/mm."""
        if self.mu_override is not None:
            return float(self.mu_override)
        return ca_mass_attenuation(self.w_ip, self.mu_rho_ip, self.mu_rho_w) * self.rho_ca / 10.0


# --------------------------------------------------------------------------
# ray / cylinder kernel
# --------------------------------------------------------------------------

def _dot(a, b):
    # explicit sum keeps results independent of array length (bit-reproducible)
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def ray_cylinder_chord(origin, direction, a, b, radius):
    """Length of the ray ``origin + t*direction`` (t >= 0) inside the finite,
    uncapped cylinder of ``radius`` around segment ``a``-``b``.

    All arguments broadcast; ``direction`` must be unit length.
    """
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    r = np.asarray(radius, dtype=float)
    axis = b - a
    length = np.sqrt(_dot(axis, axis))
    w = axis / length[..., None]
    m = o - a
    dw = _dot(d, w)
    mw = _dot(m, w)
    d_perp = d - dw[..., None] * w
    m_perp = m - mw[..., None] * w
    qa = _dot(d_perp, d_perp)
    qb = _dot(m_perp, d_perp)
    qc = _dot(m_perp, m_perp) - r * r
    parallel = qa < 1e-14
    safe_a = np.where(parallel, 1.0, qa)
    disc = qb * qb - qa * qc
    root = np.sqrt(np.maximum(disc, 0.0))
    t0 = np.where(parallel, -np.inf, (-qb - root) / safe_a)
    t1 = np.where(parallel, np.inf, (-qb + root) / safe_a)
    hit = np.where(parallel, qc <= 0.0, disc > 0.0)
    # axial slab 0 <= mw + t*dw <= length
    flat = np.abs(dw) < 1e-14
    safe_dw = np.where(flat, 1.0, dw)
    s0 = (0.0 - mw) / safe_dw
    s1 = (length - mw) / safe_dw
    lo_s = np.where(flat, -np.inf, np.minimum(s0, s1))
    hi_s = np.where(flat, np.inf, np.maximum(s0, s1))
    in_slab = np.where(flat, (mw >= 0.0) & (mw <= length), True)
    lo = np.maximum(np.maximum(t0, lo_s), 0.0)
    hi = np.minimum(t1, hi_s)
    chord = np.where(hit & in_slab, np.maximum(hi - lo, 0.0), 0.0)
    return chord[()] if chord.ndim == 0 else chord


# --------------------------------------------------------------------------
# forward projection
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ProjectionStack:
    frames: np.ndarray  # (T, H, W) line integrals
    trajectory: CArmTrajectory


def tree_segments(tree: VesselTree) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(i, i+1)`` of consecutive nodes within each branch."""
    first, second = [], []
    for b in tree.branches:
        lo, hi = b.node_range
        first.append(np.arange(lo, hi - 1))
        second.append(np.arange(lo + 1, hi))
    return np.concatenate(first), np.concatenate(second)


def _pixel_rects(geom: ProjectionGeometry, a, b, r):
    """Conservative pixel rectangles covering each cylinder's projection."""
    lo = np.minimum(a, b) - r[:, None]
    hi = np.maximum(a, b) + r[:, None]
    corners = np.stack([
        np.column_stack([(hi if i & 1 else lo)[:, 0], (hi if i & 2 else lo)[:, 1],
                         (hi if i & 4 else lo)[:, 2]])
        for i in range(8)
    ], axis=1)  # (S, 8, 3)
    uv, depth = geom.project(corners)
    if np.any(depth <= 0):
        raise ValueError("vessel segment behind the source")
    H, W = geom.shape
    c0 = np.clip(np.floor(uv[..., 0].min(axis=1)).astype(np.int64) - 1, 0, W)
    c1 = np.clip(np.ceil(uv[..., 0].max(axis=1)).astype(np.int64) + 1, -1, W - 1)
    r0 = np.clip(np.floor(uv[..., 1].min(axis=1)).astype(np.int64) - 1, 0, H)
    r1 = np.clip(np.ceil(uv[..., 1].max(axis=1)).astype(np.int64) + 1, -1, H - 1)
    return c0, c1, r0, r1


def _pairs(geom: ProjectionGeometry, a, b, r, cull: bool):
    H, W = geom.shape
    S = len(r)
    if not cull:
        seg = np.repeat(np.arange(S), H * W)
        pix = np.tile(np.arange(H * W), S)
        return seg, pix
    c0, c1, r0, r1 = _pixel_rects(geom, a, b, r)
    nc = np.maximum(c1 - c0 + 1, 0)
    nr = np.maximum(r1 - r0 + 1, 0)
    counts = nc * nr
    seg = np.repeat(np.arange(S), counts)
    offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    ncs = np.repeat(np.maximum(nc, 1), counts)
    rows = np.repeat(r0, counts) + offsets // ncs
    cols = np.repeat(c0, counts) + offsets % ncs
    return seg, rows * W + cols


def project_frame(geom: ProjectionGeometry, a: np.ndarray, b: np.ndarray, r: np.ndarray,
                  weights: np.ndarray, cull: bool = True) -> np.ndarray:
    """Sum of ``weights[s] * chord(ray(pixel), segment s)`` over segments.

    Contributions are accumulated per pixel in segment order, so culled and
    exhaustive evaluation agree bit for bit.
    """
    H, W = geom.shape
    active = weights != 0.0
    if cull:
        idx = np.nonzero(active)[0]
    else:
        idx = np.arange(len(r))
    img = np.zeros(H * W)
    if len(idx) == 0:
        return img.reshape(H, W)
    seg, pix = _pairs(geom, a[idx], b[idx], r[idx], cull)
    pixels = geom.pixel_positions().reshape(-1, 3)
    dirs = pixels - geom.source
    dirs = dirs / np.sqrt(_dot(dirs, dirs))[:, None]
    chord = ray_cylinder_chord(geom.source, dirs[pix], a[idx][seg], b[idx][seg], r[idx][seg])
    img = np.bincount(pix, weights[idx][seg] * chord, minlength=H * W)
    return img.reshape(H, W)


def forward_project(tree: VesselTree, conc: ConcentrationMap | np.ndarray, traj: CArmTrajectory,
                    atten: AttenuationModel = AttenuationModel(), rng: np.random.Generator | None = None,
                    cull: bool = True) -> ProjectionStack:
    """Line-integral images of the contrast-filled tree, one per frame.

    Segment concentration is the mean of its two end nodes at that frame.
    """
    values = conc.values if isinstance(conc, ConcentrationMap) else np.asarray(conc, dtype=float)
    if values.shape != (tree.n_nodes, traj.n_frames):
        raise ValueError(f"concentration shape {values.shape} does not match "
                         f"(P={tree.n_nodes}, T={traj.n_frames})")
    i, j = tree_segments(tree)
    a, b = tree.positions[i], tree.positions[j]
    r = 0.5 * (tree.radii[i] + tree.radii[j])
    mu = atten.mu_eff
    frames = np.empty((traj.n_frames, traj.det_rows, traj.det_cols))
    for t in range(traj.n_frames):
        geom = geometry_at(traj, t)
        c_seg = 0.5 * (values[i, t] + values[j, t])
        frames[t] = project_frame(geom, a, b, r, mu * c_seg, cull=cull)
    if atten.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires a random generator")
        frames = np.maximum(frames + rng.normal(0.0, atten.noise_sigma, frames.shape), 0.0)
    return ProjectionStack(frames, traj)


def intensity_domain(stack: ProjectionStack | np.ndarray, i0: float = 1.0) -> np.ndarray:
    if i0 <= 0:
        raise ValueError("i0 must be positive")
    g = stack.frames if isinstance(stack, ProjectionStack) else np.asarray(stack)
    return i0 * np.exp(-g)


def line_integrals(intensity: np.ndarray, i0: float = 1.0) -> np.ndarray:
    return -np.log(np.asarray(intensity) / i0)
