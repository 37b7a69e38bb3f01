"""Reconstruction error metrics and the statistics behind the evaluation reports.

Standard deviations are population (biased) throughout.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

MAPE_THRESHOLD = 0.01


class UndefinedMetricError(ValueError):
    pass


def _masked(x, x_hat, mask):
    x = np.asarray(x, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    if mask is None:
        return x.ravel(), x_hat.ravel()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        # node mask applied to every frame
        mask = np.broadcast_to(mask.reshape(mask.shape + (1,) * (x.ndim - mask.ndim)), x.shape)
    return x[mask], x_hat[mask]


def mae(x, x_hat, mask=None) -> float:
    a, b = _masked(x, x_hat, mask)
    if a.size == 0:
        raise ValueError("mask selects no points")
    return float(np.mean(np.abs(a - b)))


class MapeResult(NamedTuple):
    percent: float
    used: int
    excluded: int


def mape(x, x_hat, mask=None, threshold: float = MAPE_THRESHOLD) -> MapeResult:
    """Mean absolute percentage error over points whose ground truth exceeds ``threshold``."""
    a, b = _masked(x, x_hat, mask)
    if a.size == 0:
        raise ValueError("mask selects no points")
    keep = a > threshold
    if not np.any(keep):
        raise UndefinedMetricError("all points fall below the MAPE threshold")
    ape = np.abs(a[keep] - b[keep]) / a[keep]
    return MapeResult(100.0 * float(ape.mean()), int(keep.sum()), int((~keep).sum()))


def r_squared(x, x_hat) -> float:
    a, b = _masked(x, x_hat, None)
    if a.size < 2:
        raise ValueError("need at least two points")
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0:
        raise UndefinedMetricError("ground truth has zero variance")
    return 1.0 - float(np.sum((a - b) ** 2)) / ss_tot


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size or a.size < 2:
        raise ValueError("need two equally long samples of at least two points")
    da = a - a.mean()
    db = b - b.mean()
    sa = float(np.sqrt(np.sum(da * da)))
    sb = float(np.sqrt(np.sum(db * db)))
    if sa == 0 or sb == 0:
        raise UndefinedMetricError("zero variance")
    return float(np.clip(np.sum(da * db) / (sa * sb), -1.0, 1.0))


def diffusivity(x) -> float:
    """Negative population standard deviation of a concentration map."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("empty map")
    return -float(np.std(x))


# --------------------------------------------------------------------------
# aggregation over branches and cases
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Summary:
    mean: float
    median: float
    std: float
    n: int
    weighted_mean: float


def summarize(values, weights=None) -> Summary:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("nothing to summarize")
    w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=float)
    return Summary(float(v.mean()), float(np.median(v)), float(v.std()), int(v.size),
                   float(np.sum(v * w) / np.sum(w)))


@dataclass(frozen=True)
class ErrorRecord:
    """Error sums for one branch of one case."""

    case: str
    branch: str
    abs_sum: float
    n: int
    ape_sum: float = 0.0
    n_ape: int = 0

    @property
    def mae(self) -> float:
        return self.abs_sum / self.n

    @property
    def mape(self) -> float:
        return 100.0 * self.ape_sum / self.n_ape if self.n_ape else float("nan")


def error_record(case: str, branch: str, x, x_hat, threshold: float = MAPE_THRESHOLD) -> ErrorRecord:
    x = np.asarray(x, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    err = np.abs(x - x_hat)
    keep = x > threshold
    return ErrorRecord(case, branch, float(err.sum()), int(x.size),
                       float(np.sum(err[keep] / x[keep])), int(keep.sum()))


def aggregate(records: Sequence[ErrorRecord], split: str = "by_branch",
              metric: str = "mae") -> Summary:
    """Mean/median/std of branch-averaged (``by_branch``) or case-averaged (``by_case``) errors."""
    if not records:
        raise ValueError("no records")
    if metric not in ("mae", "mape"):
        raise ValueError(f"unknown metric {metric!r}")
    if split == "by_branch":
        if metric == "mae":
            vals = [r.mae for r in records]
            w = [r.n for r in records]
        else:
            use = [r for r in records if r.n_ape]
            vals = [r.mape for r in use]
            w = [r.n_ape for r in use]
        return summarize(vals, w)
    if split == "by_case":
        sums: dict[str, list[float]] = defaultdict(lambda: [0.0, 0])
        for r in records:
            acc = sums[r.case]
            if metric == "mae":
                acc[0] += r.abs_sum
                acc[1] += r.n
            else:
                acc[0] += 100.0 * r.ape_sum
                acc[1] += r.n_ape
        items = [(s, n) for s, n in sums.values() if n]
        return summarize([s / n for s, n in items], [n for _, n in items])
    raise ValueError(f"unknown split {split!r}")


# --------------------------------------------------------------------------
# per-branch analyses
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BranchCase:
    """Branch-level quantities of one case for the correlation and Bland-Altman reports."""

    case: str
    branch: str
    gt_mean: float
    pred_mean: float
    signed_error: float
    radius: float
    diffusivity: float
    overlap: float
    foreshortening: float
    flow_rate: float
    ape_mean: float
    ape_median: float
    ape_std: float


PARAMETERS = ("diffusivity", "overlap", "foreshortening", "flow_rate")
ERROR_STATS = ("ape_mean", "ape_median", "ape_std")


@dataclass(frozen=True)
class CorrelationCell:
    parameter: str
    statistic: str
    mean_r: float
    n_branches: int
    n_skipped: int


def correlation_table(rows: Iterable[BranchCase], parameters=PARAMETERS,
                      statistics=ERROR_STATS) -> list[CorrelationCell]:
    """Pearson correlation per branch across cases, averaged over branches.

    Branches with fewer than two cases or with a constant parameter/statistic
    are skipped for that cell; a cell with no usable branch reports NaN.
    """
    by_branch: dict[str, list[BranchCase]] = defaultdict(list)
    for r in rows:
        by_branch[r.branch].append(r)
    table = []
    for p in parameters:
        for s in statistics:
            rs = []
            skipped = 0
            for items in by_branch.values():
                a = np.array([getattr(i, p) for i in items])
                b = np.array([getattr(i, s) for i in items])
                ok = np.isfinite(a) & np.isfinite(b)
                try:
                    rs.append(pearson(a[ok], b[ok]))
                except ValueError:
                    skipped += 1
            mean_r = float(np.mean(rs)) if rs else float("nan")
            table.append(CorrelationCell(p, s, mean_r, len(rs), skipped))
    return table


def bland_altman_rows(rows: Iterable[BranchCase]) -> list[tuple[str, str, float, float, float]]:
    """``(case, branch, mean concentration, signed error, mean radius)`` per branch-case.

    The concentration is the mean of ground truth and prediction; the error is
    prediction minus ground truth, so positive values mean overestimation.
    """
    return [(r.case, r.branch, 0.5 * (r.gt_mean + r.pred_mean), r.signed_error, r.radius)
            for r in rows]
