"""Moment-based estimation of the power and dispersion parameters.

Var(Y) = phi * mu**p implies log(var) = log(phi) + p * log(mean), and the
observed per-row moments follow that line only piecewise, so the log-mean
axis is split into intervals (unit-width by default) and an ordinary
least squares line is fitted on each.  The slope estimates the power p,
the intercept estimates delta = log(phi).  Interval estimates are then
split into symmetric per-index components for training: additive halves
for p, multiplicative square roots for phi.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .cooccur import RowStats
from .model import DispersionAssignment

logger = logging.getLogger(__name__)

# composed powers are kept this far inside (1, 2); the trainer's formulas
# divide by (p - 1) and (2 - p)
CLAMP_EPS = 0.01

TABLE_CSV_HEADER = ["interval", "delta", "delta_high", "delta_low",
                    "log_mu_lo", "log_mu_hi", "p", "n_points", "flagged"]


@dataclass
class DispersionInterval:
    lo: float
    hi: float
    p_hat: float
    delta_hat: float
    delta_high: float
    delta_low: float
    n_points: int
    flagged: bool

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)


@dataclass
class DispersionTable:
    """Contiguous, ordered intervals covering the observed log-mean range."""

    intervals: list[DispersionInterval]

    def __post_init__(self) -> None:
        if not self.intervals:
            raise ValueError("a dispersion table needs at least one interval")
        for a, b in zip(self.intervals, self.intervals[1:]):
            if not math.isclose(a.hi, b.lo, rel_tol=0.0, abs_tol=1e-12):
                raise ValueError("intervals must be contiguous")

    def __len__(self) -> int:
        return len(self.intervals)

    def locate(self, log_mean: float) -> int:
        """Index of the interval containing log_mean, snapping out-of-range
        values (including -inf for zero-mean rows) to the nearest end."""
        if log_mean < self.intervals[0].lo:
            return 0
        for k, iv in enumerate(self.intervals):
            if log_mean < iv.hi:
                return k
        return len(self.intervals) - 1

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TABLE_CSV_HEADER)
            for k, iv in enumerate(self.intervals):
                writer.writerow([k, repr(iv.delta_hat), repr(iv.delta_high),
                                 repr(iv.delta_low), repr(iv.lo), repr(iv.hi),
                                 repr(iv.p_hat), iv.n_points, int(iv.flagged)])

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DispersionTable":
        intervals = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != TABLE_CSV_HEADER:
                raise ValueError(f"unexpected table header {header}")
            for rec in reader:
                intervals.append(DispersionInterval(
                    lo=float(rec[4]), hi=float(rec[5]), p_hat=float(rec[6]),
                    delta_hat=float(rec[1]), delta_high=float(rec[2]),
                    delta_low=float(rec[3]), n_points=int(rec[7]),
                    flagged=bool(int(rec[8]))))
        return cls(intervals)


def default_breakpoints(log_means: np.ndarray) -> list[float]:
    """Unit-width integer-boundary edges; the top interval stretches to the
    observed maximum when it is not itself an integer."""
    lo = math.floor(log_means.min())
    top = float(log_means.max())
    edges = [float(v) for v in range(lo, math.floor(top) + 1)]
    if top > edges[-1]:
        edges.append(top)
    if len(edges) < 2:
        edges.append(edges[-1] + 1.0)
    return edges


def fit_table(stats: RowStats, breakpoints: list[float] | None = None) -> DispersionTable:
    """Piecewise OLS of log variance on log mean across rows.

    Rows with zero mean or zero variance are excluded.  Per interval the
    slope is the power estimate and the intercept is delta = log(phi);
    delta_high/delta_low are intercepts of parallel lines through the
    points of maximum and minimum signed residual.  Intervals with fewer
    than two points (or no log-mean spread) are flagged as unreliable.
    """
    mask = (stats.mean > 0.0) & (stats.variance > 0.0)
    if not mask.any():
        raise ValueError("no rows with positive mean and variance")
    x = np.log(stats.mean[mask])
    y = np.log(stats.variance[mask])
    if breakpoints is None:
        edges = default_breakpoints(x)
    else:
        edges = [float(v) for v in breakpoints]
        if len(edges) < 2 or np.any(np.diff(edges) <= 0.0):
            raise ValueError("breakpoints must be strictly increasing, >= 2 edges")

    intervals = []
    last = len(edges) - 2
    for k in range(len(edges) - 1):
        lo, hi = edges[k], edges[k + 1]
        if k == last:
            sel = (x >= lo) & (x <= hi)  # closed top interval
        else:
            sel = (x >= lo) & (x < hi)
        xs, ys = x[sel], y[sel]
        n_pts = int(sel.sum())
        if n_pts < 2 or float(np.ptp(xs)) == 0.0:
            intervals.append(DispersionInterval(
                lo=lo, hi=hi, p_hat=math.nan, delta_hat=math.nan,
                delta_high=math.nan, delta_low=math.nan,
                n_points=n_pts, flagged=True))
            continue
        xm, ym = xs.mean(), ys.mean()
        slope = float(((xs - xm) * (ys - ym)).sum() / ((xs - xm) ** 2).sum())
        intercept = float(ym - slope * xm)
        resid = ys - (intercept + slope * xs)
        intervals.append(DispersionInterval(
            lo=lo, hi=hi, p_hat=slope, delta_hat=intercept,
            delta_high=intercept + float(resid.max()),
            delta_low=intercept + float(resid.min()),
            n_points=n_pts, flagged=False))
    return DispersionTable(intervals)


def _nearest_valid(table: DispersionTable, k: int) -> DispersionInterval:
    valid = [(abs(iv.midpoint - table.intervals[k].midpoint), i)
             for i, iv in enumerate(table.intervals) if not iv.flagged]
    if not valid:
        raise ValueError("dispersion table has no unflagged interval")
    _, best = min(valid)
    return table.intervals[best]


def assign(table: DispersionTable, stats: RowStats) -> DispersionAssignment:
    """Per-index components from interval estimates.

    Each index i takes p_i = ptilde_i = clamp(p_hat)/2 and
    phi_i = phitilde_i = exp(delta_hat/2) of its interval, so a symmetric
    pair composes back to the interval estimates and cross pairs compose
    to the means of theirs.  Power estimates are clamped into
    (1 + CLAMP_EPS, 2 - CLAMP_EPS) before halving; rows falling in
    flagged intervals inherit the nearest valid interval.
    """
    n = len(stats)
    p_half = np.empty(n)
    phi_half = np.empty(n)
    n_clamped = 0
    for i in range(n):
        if stats.mean[i] > 0.0:
            k = table.locate(math.log(stats.mean[i]))
        else:
            k = 0
        iv = table.intervals[k]
        if iv.flagged:
            iv = _nearest_valid(table, k)
        p_eff = min(max(iv.p_hat, 1.0 + CLAMP_EPS), 2.0 - CLAMP_EPS)
        if p_eff != iv.p_hat:
            n_clamped += 1
        p_half[i] = 0.5 * p_eff
        phi_half[i] = math.exp(0.5 * iv.delta_hat)
    if n_clamped:
        logger.warning(
            "clamped out-of-range power estimates into (%.2f, %.2f) for %d of %d rows",
            1.0 + CLAMP_EPS, 2.0 - CLAMP_EPS, n_clamped, n)
    out = DispersionAssignment(p_row=p_half, p_col=p_half.copy(),
                               phi_row=phi_half, phi_col=phi_half.copy())
    out.validate()
    return out
