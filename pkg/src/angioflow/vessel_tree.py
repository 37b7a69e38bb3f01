"""Vessel-tree data model: procedural generation, centerline I/O, resampling,
flow splitting and branch decomposition.

Nodes are stored as flat numpy arrays (one row per centerline point) with
branches occupying contiguous, proximal-to-distal index ranges. Branches are
ordered so that every parent precedes its children.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

DEFAULT_SPACING = 0.46  # mm
DEFAULT_FLOW_GAMMA = 2.0


class CenterlineParseError(ValueError):
    """Raised for malformed centerline files; carries the 1-based line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Node:
    position: np.ndarray
    radius: float
    tangent: np.ndarray
    branch_id: int
    arc_pos: float
    is_bifurcation_region: bool


@dataclass(frozen=True)
class Branch:
    id: int
    node_range: tuple[int, int]
    parent: int | None
    children: tuple[int, ...]
    flow_fraction: float = 1.0

    @property
    def indices(self) -> np.ndarray:
        return np.arange(*self.node_range)

    def __len__(self) -> int:
        return self.node_range[1] - self.node_range[0]


@dataclass(frozen=True)
class BranchView:
    """Non-bifurcation node indices of one branch, in proximal-to-distal order."""

    branch_id: int
    indices: np.ndarray


@dataclass(frozen=True, eq=False)
class VesselTree:
    positions: np.ndarray
    radii: np.ndarray
    tangents: np.ndarray
    branch_ids: np.ndarray
    arc_pos: np.ndarray
    bifurcation: np.ndarray
    branches: tuple[Branch, ...]
    root_branch: int = 0
    node_spacing: float | None = None
    seed: int | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.radii)

    @property
    def nodes(self) -> list[Node]:
        return [
            Node(self.positions[i], float(self.radii[i]), self.tangents[i],
                 int(self.branch_ids[i]), float(self.arc_pos[i]), bool(self.bifurcation[i]))
            for i in range(self.n_nodes)
        ]

    def branch(self, branch_id: int) -> Branch:
        for b in self.branches:
            if b.id == branch_id:
                return b
        raise KeyError(branch_id)

    def leaves(self) -> list[Branch]:
        return [b for b in self.branches if not b.children]

    def branch_points(self, branch_id: int) -> tuple[np.ndarray, np.ndarray]:
        sl = slice(*self.branch(branch_id).node_range)
        return self.positions[sl], self.radii[sl]

    def translated(self, offset) -> "VesselTree":
        return replace(self, positions=self.positions + np.asarray(offset, dtype=float))

    def rotated(self, rotation: np.ndarray, center=(0.0, 0.0, 0.0)) -> "VesselTree":
        rotation = np.asarray(rotation, dtype=float)
        c = np.asarray(center, dtype=float)
        return replace(
            self,
            positions=(self.positions - c) @ rotation.T + c,
            tangents=self.tangents @ rotation.T,
        )

    def validate(self) -> None:
        """Check the structural invariants; raises ``ValueError`` on violation."""
        P = self.n_nodes
        if P == 0:
            raise ValueError("tree has no nodes")
        if np.any(self.radii <= 0):
            raise ValueError("non-positive radius")
        norms = np.linalg.norm(self.tangents, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("tangents are not unit vectors")
        ids = {b.id for b in self.branches}
        if len(ids) != len(self.branches):
            raise ValueError("duplicate branch ids")
        covered = np.zeros(P, dtype=int)
        for b in self.branches:
            lo, hi = b.node_range
            if hi <= lo:
                raise ValueError(f"branch {b.id} has no nodes")
            covered[lo:hi] += 1
            if np.any(self.branch_ids[lo:hi] != b.id):
                raise ValueError(f"branch {b.id}: node branch ids disagree")
            if np.any(np.diff(self.arc_pos[lo:hi]) <= 0):
                raise ValueError(f"branch {b.id}: arc positions not increasing")
            if b.parent is not None and b.parent not in ids:
                raise ValueError(f"branch {b.id}: missing parent {b.parent}")
        if np.any(covered != 1):
            raise ValueError("every node must belong to exactly one branch")
        roots = [b for b in self.branches if b.parent is None]
        if len(roots) != 1 or roots[0].id != self.root_branch:
            raise ValueError("tree must have exactly one root branch")
        seen = set()
        stack = [self.root_branch]
        while stack:
            bid = stack.pop()
            if bid in seen:
                raise ValueError("branch graph contains a cycle")
            seen.add(bid)
            b = self.branch(bid)
            for c in b.children:
                if self.branch(c).parent != bid:
                    raise ValueError(f"branch {c}: parent/child links disagree")
            stack.extend(b.children)
        if seen != ids:
            raise ValueError("branch graph is not connected")
        if abs(self.branch(self.root_branch).flow_fraction - 1.0) > 1e-12:
            raise ValueError("root flow fraction must be 1")
        for b in self.branches:
            if b.children:
                total = sum(self.branch(c).flow_fraction for c in b.children)
                if abs(total - b.flow_fraction) > 1e-12:
                    raise ValueError(f"branch {b.id}: flow not conserved at bifurcation")


# --------------------------------------------------------------------------
# construction helpers
# --------------------------------------------------------------------------

def _tangents(points: np.ndarray) -> np.ndarray:
    t = np.empty_like(points)
    if len(points) == 1:
        raise ValueError("branch needs at least two points")
    t[0] = points[1] - points[0]
    t[-1] = points[-1] - points[-2]
    if len(points) > 2:
        t[1:-1] = points[2:] - points[:-2]
    n = np.linalg.norm(t, axis=1)
    if np.any(n == 0):
        raise ValueError("coincident consecutive points")
    return t / n[:, None]


def _arc(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _topological(entries: dict[int, int | None]) -> list[int]:
    children: dict[int, list[int]] = {k: [] for k in entries}
    for k, p in entries.items():
        if p is not None:
            children[p].append(k)
    roots = [k for k, p in entries.items() if p is None]
    order = []
    queue = list(roots)
    while queue:
        k = queue.pop(0)
        order.append(k)
        queue.extend(children[k])
    return order


def build_tree(
    polylines: Sequence[tuple[int, int | None, np.ndarray, np.ndarray]],
    node_spacing: float | None = None,
    seed: int | None = None,
    gamma: float = DEFAULT_FLOW_GAMMA,
) -> VesselTree:
    """Assemble a tree from ``(branch_id, parent_id, points, radii)`` tuples.

    Branches are reordered breadth-first from the root; tangents, arc
    positions, bifurcation flags and flow fractions are derived.
    """
    entries = {}
    data = {}
    for bid, parent, pts, rad in polylines:
        bid = int(bid)
        if bid in entries:
            raise ValueError(f"duplicate branch id {bid}")
        entries[bid] = None if parent is None else int(parent)
        data[bid] = (np.asarray(pts, dtype=float).reshape(-1, 3), np.asarray(rad, dtype=float).ravel())
    for bid, p in entries.items():
        if p is not None and p not in entries:
            raise ValueError(f"branch {bid} references missing parent {p}")
    roots = [k for k, p in entries.items() if p is None]
    if len(roots) != 1:
        raise ValueError(f"expected exactly one root branch, found {len(roots)}")
    order = _topological(entries)
    if len(order) != len(entries):
        raise ValueError("branch graph contains a cycle")

    positions, radii, tangents, bids, arcs = [], [], [], [], []
    ranges = {}
    start = 0
    for bid in order:
        pts, rad = data[bid]
        if len(pts) != len(rad):
            raise ValueError(f"branch {bid}: point/radius count mismatch")
        if len(pts) < 2:
            raise ValueError(f"branch {bid} needs at least two points")
        if np.any(rad <= 0):
            raise ValueError(f"branch {bid}: non-positive radius")
        positions.append(pts)
        radii.append(rad)
        tangents.append(_tangents(pts))
        bids.append(np.full(len(pts), bid, dtype=np.int64))
        arcs.append(_arc(pts))
        ranges[bid] = (start, start + len(pts))
        start += len(pts)

    kids = {k: tuple(c for c in order if entries[c] == k) for k in order}
    branches = tuple(
        Branch(bid, ranges[bid], entries[bid], kids[bid]) for bid in order
    )
    tree = VesselTree(
        positions=np.concatenate(positions),
        radii=np.concatenate(radii),
        tangents=np.concatenate(tangents),
        branch_ids=np.concatenate(bids),
        arc_pos=np.concatenate(arcs),
        bifurcation=np.zeros(start, dtype=bool),
        branches=branches,
        root_branch=roots[0],
        node_spacing=node_spacing,
        seed=seed,
    )
    tree = replace(tree, bifurcation=_bifurcation_flags(tree))
    return flow_splits(tree, gamma)


def _bifurcation_flags(tree: VesselTree) -> np.ndarray:
    # contiguous runs from the junction end(s), within one local radius
    flags = np.zeros(tree.n_nodes, dtype=bool)
    for b in tree.branches:
        lo, hi = b.node_range
        if b.children:
            junction = tree.positions[hi - 1]
            for i in range(hi - 1, lo - 1, -1):
                if np.linalg.norm(tree.positions[i] - junction) <= tree.radii[i]:
                    flags[i] = True
                else:
                    break
        if b.parent is not None:
            plo, phi = tree.branch(b.parent).node_range
            junction = tree.positions[phi - 1]
            for i in range(lo, hi):
                if np.linalg.norm(tree.positions[i] - junction) <= tree.radii[i]:
                    flags[i] = True
                else:
                    break
    return flags


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------

def flow_splits(tree: VesselTree, gamma: float = DEFAULT_FLOW_GAMMA) -> VesselTree:
    """Fill ``flow_fraction`` with a child-radius power law, propagated from the root.

    At every bifurcation child ``k`` receives ``rbar_k**gamma / sum_j rbar_j**gamma``
    of its parent's flow, with ``rbar`` the mean radius of the child branch.
    """
    fractions = {tree.root_branch: 1.0}
    for b in tree.branches:  # parents precede children
        if not b.children:
            continue
        weights = np.array([tree.radii[slice(*tree.branch(c).node_range)].mean() ** gamma
                            for c in b.children])
        weights = weights / weights.sum()
        parent_frac = fractions[b.id]
        acc = 0.0
        for c, w in zip(b.children[:-1], weights[:-1]):
            fractions[c] = parent_frac * float(w)
            acc += fractions[c]
        # last child takes the remainder so sums are exact
        fractions[b.children[-1]] = parent_frac - acc
    branches = tuple(replace(b, flow_fraction=fractions[b.id]) for b in tree.branches)
    return replace(tree, branches=branches)


def resample(tree: VesselTree, h: float = DEFAULT_SPACING,
             gamma: float = DEFAULT_FLOW_GAMMA) -> VesselTree:
    """Arc-length resampling of every branch at spacing close to ``h``.

    Each branch of length ``L`` gets ``round(L / h)`` equal segments (positions
    and radii linearly interpolated along the input polyline); branches
    shorter than ``2 h`` keep just their two endpoints.
    """
    if h <= 0:
        raise ValueError("spacing must be positive")
    polylines = []
    for b in tree.branches:
        pts, rad = tree.branch_points(b.id)
        s = _arc(pts)
        length = s[-1]
        n_seg = 1 if length < 2 * h else max(1, int(round(length / h)))
        s_new = np.linspace(0.0, length, n_seg + 1)
        new_pts = np.column_stack([np.interp(s_new, s, pts[:, k]) for k in range(3)])
        # np.interp may move the last point by rounding; pin the endpoints
        new_pts[0], new_pts[-1] = pts[0], pts[-1]
        new_rad = np.interp(s_new, s, rad)
        polylines.append((b.id, b.parent, new_pts, new_rad))
    return build_tree(polylines, node_spacing=h, seed=tree.seed, gamma=gamma)


def decompose(tree: VesselTree) -> list[BranchView]:
    views = []
    for b in tree.branches:
        idx = b.indices[~tree.bifurcation[slice(*b.node_range)]]
        if len(idx):
            views.append(BranchView(b.id, idx))
    return views


def recombine(views: Iterable[BranchView], parts: Iterable[np.ndarray], n_nodes: int,
              fill: float = np.nan) -> np.ndarray:
    """Inverse of :func:`decompose` for per-branch ``(..., P_b, T)`` arrays."""
    out = None
    for view, part in zip(views, parts):
        part = np.asarray(part)
        if out is None:
            shape = part.shape[:-2] + (n_nodes, part.shape[-1])
            out = np.full(shape, fill, dtype=np.result_type(part.dtype, np.asarray(fill).dtype))
        out[..., view.indices, :] = part
    if out is None:
        raise ValueError("no branch views given")
    return out


def split_map(views: Sequence[BranchView], values: np.ndarray) -> list[np.ndarray]:
    """Slice a ``(..., P, T)`` array into per-branch blocks."""
    return [values[..., v.indices, :] for v in views]


# --------------------------------------------------------------------------
# centerline file format
# --------------------------------------------------------------------------

HEADER = "CENTERLINE v1"


def export_centerlines(tree: VesselTree) -> str:
    """Serialize to the plain-text polyline format.

    Floats are written with the shortest repr that round-trips exactly.
    """
    lines = [HEADER]
    for b in tree.branches:
        parent = -1 if b.parent is None else b.parent
        lines.append(f"branch {b.id} parent {parent}")
        pts, rad = tree.branch_points(b.id)
        for p, r in zip(pts, rad):
            lines.append(" ".join(repr(float(v)) for v in (*p, r)))
        lines.append("")
    return "\n".join(lines) + "\n"


def import_centerlines(text: str, gamma: float = DEFAULT_FLOW_GAMMA) -> VesselTree:
    """Parse the plain-text polyline format (no resampling)."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise CenterlineParseError(1, f"expected header {HEADER!r}")
    blocks: list[tuple[int, int | None, list, list, int]] = []
    current = None
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            if not line:
                current = None
            continue
        tokens = line.split()
        if tokens[0] == "branch":
            if len(tokens) != 4 or tokens[2] != "parent":
                raise CenterlineParseError(lineno, "expected 'branch <id> parent <id|-1>'")
            try:
                bid, parent = int(tokens[1]), int(tokens[3])
            except ValueError:
                raise CenterlineParseError(lineno, "branch ids must be integers") from None
            if any(blk[0] == bid for blk in blocks):
                raise CenterlineParseError(lineno, f"duplicate branch id {bid}")
            current = (bid, None if parent == -1 else parent, [], [], lineno)
            blocks.append(current)
            continue
        if current is None:
            raise CenterlineParseError(lineno, "point outside a branch block")
        if len(tokens) != 4:
            raise CenterlineParseError(lineno, "expected 'x y z r'")
        try:
            x, y, z, r = (float(t) for t in tokens)
        except ValueError:
            raise CenterlineParseError(lineno, "non-numeric value") from None
        if not all(math.isfinite(v) for v in (x, y, z, r)):
            raise CenterlineParseError(lineno, "non-finite value")
        if r <= 0:
            raise CenterlineParseError(lineno, f"non-positive radius {r}")
        current[2].append((x, y, z))
        current[3].append(r)
    if not blocks:
        raise CenterlineParseError(len(lines), "no branches")
    ids = {blk[0] for blk in blocks}
    for bid, parent, pts, rad, lineno in blocks:
        if parent is not None and parent not in ids:
            raise CenterlineParseError(lineno, f"branch {bid} references missing parent {parent}")
        if len(pts) < 2:
            raise CenterlineParseError(lineno, f"branch {bid} needs at least two points")
    try:
        return build_tree([(b, p, np.array(pts), np.array(rad)) for b, p, pts, rad, _ in blocks],
                          gamma=gamma)
    except ValueError as exc:
        raise CenterlineParseError(blocks[0][4], str(exc)) from None


# --------------------------------------------------------------------------
# procedural generation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TreeGenParams:
    depth: int = 3
    branch_length: tuple[float, float] = (18.0, 30.0)
    root_length: float | None = 40.0
    root_radius: float = 2.0
    murray_exponent: float = 3.0
    tortuosity_amplitude: float = 1.0
    tortuosity_wavelength: float = 20.0
    siphon_probability: float = 0.3
    half_angle: tuple[float, float] = (0.35, 0.8)
    asymmetry: tuple[float, float] = (0.7, 1.0)
    node_spacing: float = DEFAULT_SPACING

    def check(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        lo, hi = self.branch_length
        if lo <= 0 or hi < lo:
            raise ValueError("invalid branch length range")
        if self.root_length is not None and self.root_length <= 0:
            raise ValueError("root length must be positive")
        if self.root_radius <= 0:
            raise ValueError("root radius must be positive")
        if not 0.0 <= self.siphon_probability <= 1.0:
            raise ValueError("siphon probability must lie in [0, 1]")
        if self.node_spacing <= 0:
            raise ValueError("node spacing must be positive")
        shortest = min(lo, self.root_length or lo)
        if shortest < 2 * self.node_spacing:
            raise ValueError(
                f"branches of {shortest} mm would have fewer than 3 nodes at spacing "
                f"{self.node_spacing} mm"
            )
        if self.tortuosity_wavelength <= 0 or self.tortuosity_amplitude < 0:
            raise ValueError("invalid tortuosity")
        if 2 * math.pi * self.tortuosity_amplitude / self.tortuosity_wavelength >= 0.8:
            raise ValueError("tortuosity amplitude too large for its wavelength")


def murray_children(r_parent: float, ratio: float, k: float) -> tuple[float, float]:
    """Child radii ``(r1, r1*ratio)`` with ``r_parent**k = r1**k + r2**k``."""
    r1 = r_parent / (1.0 + ratio ** k) ** (1.0 / k)
    return r1, r1 * ratio


def _rotate(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    return (v * math.cos(angle) + np.cross(axis, v) * math.sin(angle)
            + axis * np.dot(axis, v) * (1 - math.cos(angle)))


def _perpendicular(d: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        v -= d * np.dot(v, d)
        n = np.linalg.norm(v)
        if n > 1e-6:
            return v / n


def _branch_path(start, direction, length, radius, params: TreeGenParams,
                 rng: np.random.Generator, step: float) -> np.ndarray:
    """Dense polyline: straight run, optional 270 degree helical siphon, sinusoidal wiggle."""
    d = direction / np.linalg.norm(direction)
    siphon = rng.random() < params.siphon_probability
    wiggle_axis = _perpendicular(d, rng)
    phase = 0.0
    if not siphon:
        n = max(2, int(math.ceil(length / step)) + 1)
        s = np.linspace(0.0, length, n)
        base = start + s[:, None] * d
    else:
        arc_r = max(3.0 * radius, 10.0 * params.node_spacing)
        turn_axis = _perpendicular(d, rng)
        pitch = 4.0 * radius  # axial rise per 270 degrees; keeps the loop from touching itself
        lead = 0.35 * length
        pts = [start]
        pos = start.copy()
        heading = d.copy()
        for _ in range(int(math.ceil(lead / step))):
            pos = pos + heading * step
            pts.append(pos)
        arc_len = 1.5 * math.pi * arc_r
        n_arc = int(math.ceil(arc_len / step))
        ds = arc_len / n_arc
        for _ in range(n_arc):
            heading = _rotate(heading, turn_axis, ds / arc_r)
            pos = pos + heading * ds + turn_axis * (pitch * ds / arc_len)
            pts.append(pos)
        tail = length - lead
        for _ in range(int(math.ceil(tail / step))):
            pos = pos + heading * step
            pts.append(pos)
        base = np.array(pts)
        s = _arc(base)
    amp = params.tortuosity_amplitude * rng.uniform(0.5, 1.0)
    wiggle = amp * np.sin(2 * math.pi * s / params.tortuosity_wavelength + phase)
    return base + wiggle[:, None] * wiggle_axis


def generate_tree(params: TreeGenParams, seed: int, gamma: float = DEFAULT_FLOW_GAMMA) -> VesselTree:
    """Synthetic bifurcating tree, deterministic in ``(params, seed)``.

    Radii follow Murray's law with ``params.murray_exponent`` at every
    bifurcation (constant radius per branch). The result is resampled at
    ``params.node_spacing`` and centred on the origin.
    """
    params.check()
    rng = np.random.default_rng(seed)
    step = params.node_spacing / 8.0
    polylines = []
    root_len = params.root_length if params.root_length is not None else rng.uniform(*params.branch_length)
    queue = [(0, None, np.zeros(3), np.array([0.0, 0.0, 1.0]), params.root_radius, 1, root_len)]
    next_id = 1
    while queue:
        bid, parent, start, direction, radius, level, length = queue.pop(0)
        pts = _branch_path(start, direction, length, radius, params, rng, step)
        polylines.append((bid, parent, pts, np.full(len(pts), radius)))
        if level >= params.depth:
            continue
        end_dir = pts[-1] - pts[-2]
        end_dir /= np.linalg.norm(end_dir)
        ratio = rng.uniform(*params.asymmetry)
        r1, r2 = murray_children(radius, ratio, params.murray_exponent)
        plane_axis = _perpendicular(end_dir, rng)
        for r_child, sign in ((r1, 1.0), (r2, -1.0)):
            angle = sign * rng.uniform(*params.half_angle)
            child_dir = _rotate(end_dir, plane_axis, angle)
            child_len = rng.uniform(*params.branch_length)
            queue.append((next_id, bid, pts[-1].copy(), child_dir, r_child, level + 1, child_len))
            next_id += 1
    raw = build_tree(polylines, seed=seed, gamma=gamma)
    tree = resample(raw, params.node_spacing, gamma=gamma)
    lo, hi = tree.positions.min(axis=0), tree.positions.max(axis=0)
    tree = tree.translated(-(lo + hi) / 2.0)
    for b in tree.branches:
        if len(b) < 3:
            raise ValueError(f"branch {b.id} has fewer than 3 nodes")
    return tree
