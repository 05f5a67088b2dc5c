"""Gridded-series preprocessing: annual and 5-year means with missingness rules,
grid-box aggregation, reference-period centering and control-run splitting.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ..covariance import ControlEnsemble
from ..errors import InvalidInput, LayoutMismatch

RESOLUTIONS = ("monthly", "annual", "pentad")
STEP_YEARS = {"annual": 1, "pentad": 5}


@dataclass
class GriddedSeries:
    """Time x grid-box values with an explicit missing mask.

    Missing cells hold 0.0 in ``values``; only ``missing`` marks them.
    ``grid`` is ``(n_lat, n_lon)`` with boxes in row-major (lat, lon) order.
    """

    values: np.ndarray
    missing: np.ndarray
    resolution: str
    start_year: int = 0
    grid: Optional[tuple] = None
    bounds: Optional[np.ndarray] = None  # boxes x (lon0, lon1, lat0, lat1)

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        m = np.asarray(self.missing, dtype=bool).reshape(v.shape)
        if self.resolution not in RESOLUTIONS:
            raise InvalidInput(f"unknown resolution {self.resolution!r}")
        if np.any(~np.isfinite(v[~m])):
            raise InvalidInput("non-finite value outside the missing mask")
        if self.grid is not None:
            self.grid = tuple(int(g) for g in self.grid)
            if self.grid[0] * self.grid[1] != v.shape[1]:
                raise LayoutMismatch(f"grid {self.grid} does not match {v.shape[1]} boxes")
        if self.bounds is not None:
            self.bounds = np.asarray(self.bounds, dtype=float).reshape(v.shape[1], 4)
        self.values = np.where(m, 0.0, v)
        self.missing = m

    @classmethod
    def from_array(cls, arr, resolution, start_year=0, grid=None, bounds=None) -> "GriddedSeries":
        """Build from an array using NaN as the missing marker."""
        a = np.atleast_2d(np.asarray(arr, dtype=float))
        return cls(a, np.isnan(a), resolution, start_year, grid, bounds)

    def to_array(self) -> np.ndarray:
        return np.where(self.missing, np.nan, self.values)

    @property
    def n_time(self) -> int:
        return self.values.shape[0]

    @property
    def n_boxes(self) -> int:
        return self.values.shape[1]

    def years(self) -> np.ndarray:
        """Calendar year in which each time step starts."""
        if self.resolution == "monthly":
            return self.start_year + np.arange(self.n_time) // 12
        return self.start_year + STEP_YEARS[self.resolution] * np.arange(self.n_time)


@dataclass
class PreprocessRules:
    min_months_per_year: int = 9
    max_missing_annuals_per_pentad: int = 2
    block_years: int = 60
    reference: Optional[tuple] = (1961, 1990)
    aggregate: tuple = (1, 1)

    def __post_init__(self):
        if not 0 < self.min_months_per_year <= 12:
            raise InvalidInput("min_months_per_year must lie in 1..12")
        if not 0 <= self.max_missing_annuals_per_pentad < 5:
            raise InvalidInput("max_missing_annuals_per_pentad must lie in 0..4")
        if self.block_years < 5:
            raise InvalidInput("block_years must be at least 5")
        self.aggregate = tuple(int(a) for a in self.aggregate)
        if len(self.aggregate) != 2 or min(self.aggregate) < 1:
            raise InvalidInput("aggregate must be two positive factors")


def _window_means(series: GriddedSeries, width: int, min_present: int) -> tuple:
    n = series.n_time // width
    v = series.values[: n * width].reshape(n, width, -1)
    present = ~series.missing[: n * width].reshape(n, width, -1)
    count = present.sum(axis=1)
    total = np.where(present, v, 0.0).sum(axis=1)
    ok = count >= min_present
    means = np.divide(total, count, out=np.zeros_like(total), where=ok)
    return means, ~ok


def annual_means(monthly: GriddedSeries, rules: PreprocessRules = PreprocessRules()) -> GriddedSeries:
    """Mean of the available months if at least ``min_months_per_year`` are present."""
    if monthly.resolution != "monthly":
        raise InvalidInput(f"expected monthly series, got {monthly.resolution}")
    if monthly.n_time % 12:
        raise InvalidInput(f"{monthly.n_time} months is not a whole number of years")
    means, missing = _window_means(monthly, 12, rules.min_months_per_year)
    return replace(monthly, values=means, missing=missing, resolution="annual")


def pentad_means(annual: GriddedSeries, rules: PreprocessRules = PreprocessRules()) -> GriddedSeries:
    """5-year means allowing at most ``max_missing_annuals_per_pentad`` missing years.

    A trailing partial window is dropped.
    """
    if annual.resolution != "annual":
        raise InvalidInput(f"expected annual series, got {annual.resolution}")
    means, missing = _window_means(annual, 5, 5 - rules.max_missing_annuals_per_pentad)
    return replace(annual, values=means, missing=missing, resolution="pentad")


def aggregate_boxes(series: GriddedSeries, factor=(1, 1)) -> GriddedSeries:
    """Unweighted mean of available sub-boxes over ``factor = (f_lat, f_lon)`` blocks."""
    f_lat, f_lon = (int(f) for f in factor)
    if series.grid is None:
        if (f_lat, f_lon) == (1, 1):
            return series
        raise LayoutMismatch("aggregation needs grid metadata")
    n_lat, n_lon = series.grid
    if f_lat < 1 or f_lon < 1 or n_lat % f_lat or n_lon % f_lon:
        raise LayoutMismatch(f"factor {factor} does not divide grid {series.grid}")
    g_lat, g_lon = n_lat // f_lat, n_lon // f_lon
    shape = (series.n_time, g_lat, f_lat, g_lon, f_lon)
    v = series.values.reshape(shape)
    present = ~series.missing.reshape(shape)
    count = present.sum(axis=(2, 4))
    total = np.where(present, v, 0.0).sum(axis=(2, 4))
    means = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    bounds = None
    if series.bounds is not None:
        b = series.bounds.reshape(g_lat, f_lat, g_lon, f_lon, 4)
        bounds = np.stack([
            b[..., 0].min(axis=(1, 3)), b[..., 1].max(axis=(1, 3)),
            b[..., 2].min(axis=(1, 3)), b[..., 3].max(axis=(1, 3)),
        ], axis=-1).reshape(-1, 4)
    return replace(
        series,
        values=means.reshape(series.n_time, -1),
        missing=(count == 0).reshape(series.n_time, -1),
        grid=(g_lat, g_lon),
        bounds=bounds,
    )


def _reference_steps(series: GriddedSeries, period) -> np.ndarray:
    y0, y1 = period
    start = series.years()
    span = 1 if series.resolution != "pentad" else 5
    return (start >= y0) & (start + span - 1 <= y1)


def center_reference(series: GriddedSeries, period) -> GriddedSeries:
    """Subtract each box's mean over the reference period (inclusive years)."""
    steps = _reference_steps(series, period)
    present = ~series.missing[steps]
    count = present.sum(axis=0)
    if steps.sum() == 0 or np.any(count == 0):
        raise InvalidInput(f"reference period {tuple(period)} has no data for some grid box")
    ref = np.where(present, series.values[steps], 0.0).sum(axis=0) / count
    return replace(series, values=series.values - ref, missing=series.missing.copy())


def detrend(series: GriddedSeries) -> GriddedSeries:
    """Remove each box's least-squares linear trend fitted to its available values."""
    t = np.arange(series.n_time, dtype=float)
    out = series.values.copy()
    for j in range(series.n_boxes):
        ok = ~series.missing[:, j]
        if ok.sum() < 2:
            continue
        slope, intercept = np.polyfit(t[ok], series.values[ok, j], 1)
        out[ok, j] -= slope * t[ok] + intercept
    return replace(series, values=out, missing=series.missing.copy())


def to_pentads(series: GriddedSeries, rules: PreprocessRules) -> GriddedSeries:
    """Monthly or annual series to aggregated 5-year means."""
    if series.resolution == "monthly":
        series = annual_means(series, rules)
    if series.resolution == "annual":
        series = pentad_means(series, rules)
    return aggregate_boxes(series, rules.aggregate)


def to_vector(series: GriddedSeries) -> tuple:
    """Flatten box-major (index ``box * T + t``); returns ``(values, missing)``."""
    return series.values.T.ravel().copy(), series.missing.T.ravel().copy()


def split_control(runs: Sequence[GriddedSeries], rules: PreprocessRules = PreprocessRules(),
                  mask=None) -> ControlEnsemble:
    """Detrend each run, cut non-overlapping blocks and stack their pentad vectors.

    ``mask`` (block time steps x boxes, True = missing, in the runs' resolution)
    is applied to every block before averaging. Coordinates missing in any
    block are dropped; their retained indices are in ``columns``. Runs shorter
    than one block are skipped with a warning.
    """
    rows, miss, skipped = [], [], 0
    for run in runs:
        per_year = 12 if run.resolution == "monthly" else 1
        if run.resolution == "pentad":
            raise InvalidInput("control runs must be monthly or annual")
        block = rules.block_years * per_year
        n_blocks = run.n_time // block
        if n_blocks == 0:
            skipped += 1
            continue
        run = detrend(run)
        for b in range(n_blocks):
            sl = slice(b * block, (b + 1) * block)
            missing = run.missing[sl].copy()
            if mask is not None:
                m = np.asarray(mask, dtype=bool)
                if m.shape != missing.shape:
                    raise LayoutMismatch(f"mask shape {m.shape} != block shape {missing.shape}")
                missing |= m
            part = replace(run, values=run.values[sl], missing=missing,
                           start_year=run.start_year + b * rules.block_years)
            vec, vmiss = to_vector(to_pentads(part, rules))
            rows.append(vec)
            miss.append(vmiss)
    if skipped:
        warnings.warn(f"skipped {skipped} control run(s) shorter than {rules.block_years} years")
    if len(rows) < 2:
        raise InvalidInput(f"only {len(rows)} control block(s); need at least 2")
    Z = np.array(rows)
    keep = ~np.any(np.array(miss), axis=0)
    Z = Z[:, keep]
    Z = Z - Z.mean(axis=0)
    return ControlEnsemble(Z, centered=True, columns=np.flatnonzero(keep))
