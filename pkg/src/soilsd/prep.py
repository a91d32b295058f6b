"""Preparation of raw PV production measurements for decomposition.

Turns sub-daily power measurements (or daily energy values) into the
scaled daily signal consumed by the decomposition: integrate to daily
energy, mask untrustworthy days, and normalize so the 95th percentile
of the known values equals one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "PowerSeries",
    "DailySignal",
    "integrate_daily",
    "apply_quality_mask",
    "scale_p95",
    "read_power_csv",
    "read_daily_csv",
    "load_signal_csv",
]

# Fraction of a day's expected samples that must be present for the day
# to count as measured.
DEFAULT_COMPLETENESS = 0.95


@dataclass(frozen=True)
class PowerSeries:
    """Uniformly sampled power measurements.

    Parameters
    ----------
    timestamps : np.ndarray
        ``datetime64`` timestamps, strictly increasing with constant
        spacing equal to ``interval_minutes``.
    values : np.ndarray
        Real power in system-native units (e.g. kW). ``NaN`` marks a
        missing sample.
    interval_minutes : int
        Sampling period. Must divide 1440 (whole number of samples per
        calendar day).
    """

    timestamps: np.ndarray
    values: np.ndarray
    interval_minutes: int

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        if ts.shape != vals.shape:
            raise ValueError("timestamps and values must have equal length")
        if self.interval_minutes <= 0 or 1440 % self.interval_minutes != 0:
            raise ValueError("interval must divide 1440 minutes")
        if ts.size >= 2:
            step = np.timedelta64(self.interval_minutes, "m").astype("timedelta64[s]")
            if not np.all(np.diff(ts) == step):
                raise ValueError("irregular sampling")

    def __len__(self):
        return self.timestamps.size


@dataclass(frozen=True)
class DailySignal:
    """Daily energy (or performance-index) series with missing-day markers.

    Parameters
    ----------
    values : np.ndarray
        One entry per calendar day; ``NaN`` marks a missing day. Raw
        (unnormalized) values must be finite and nonnegative.
    dates : np.ndarray, optional
        ``datetime64[D]`` date of each entry. Defaults to consecutive
        days starting 2000-01-01, which is adequate for synthetic data.
    scale : float
        Cumulative divisor applied to the values so far (1.0 for raw data).
    is_normalized : bool
        True once the values are in normalized units: either the signal
        is a performance index by construction or :func:`scale_p95` has
        been applied.
    """

    values: np.ndarray
    dates: np.ndarray | None = None
    scale: float = 1.0
    is_normalized: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 1:
            raise ValueError("values must be one-dimensional")
        if self.dates is None:
            start = np.datetime64("2000-01-01", "D")
            object.__setattr__(self, "dates", start + np.arange(vals.size))
        else:
            dates = np.asarray(self.dates, dtype="datetime64[D]")
            if dates.shape != vals.shape:
                raise ValueError("dates and values must have equal length")
            object.__setattr__(self, "dates", dates)
        known = vals[~np.isnan(vals)]
        if np.any(np.isinf(known)):
            raise ValueError("non-missing values must be finite")
        if not self.is_normalized and np.any(known < 0):
            raise ValueError("raw energy values must be nonnegative")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def __len__(self):
        return self.values.size

    @property
    def known_set(self):
        """Indices of days with a valid measurement."""
        return np.flatnonzero(~np.isnan(self.values))

    @property
    def n_missing(self):
        return int(np.isnan(self.values).sum())


def integrate_daily(series, completeness=DEFAULT_COMPLETENESS):
    """Integrate a power series into daily energy.

    Each day's energy is the rectangular sum ``power * interval_hours``
    over that day's non-missing samples. A day missing more than
    ``1 - completeness`` of its expected samples becomes a missing day
    (no partial-day extrapolation is attempted).

    Parameters
    ----------
    series : PowerSeries
    completeness : float
        Required fraction of expected samples per day (default 0.95).

    Returns
    -------
    DailySignal
        Daily energies in ``unit * hours`` (e.g. kWh for kW input).
    """
    if len(series) == 0:
        raise ValueError("no data")
    days = series.timestamps.astype("datetime64[D]")
    grid = np.arange(days[0], days[-1] + 1)
    expected = 1440 // series.interval_minutes
    # uniform spacing means samples of one day are contiguous
    starts = np.searchsorted(days, grid, side="left")
    stops = np.searchsorted(days, grid, side="right")
    hours = series.interval_minutes / 60.0
    energy = np.full(grid.size, np.nan)
    for i, (a, b) in enumerate(zip(starts, stops)):
        chunk = series.values[a:b]
        present = int(np.sum(~np.isnan(chunk)))
        if present >= completeness * expected:
            energy[i] = np.nansum(chunk) * hours
    if np.all(np.isnan(energy)):
        raise ValueError("no data: no calendar day passes the completeness threshold")
    return DailySignal(values=energy, dates=grid)


def apply_quality_mask(signal, flags):
    """Mark days that fail an external quality check as missing.

    Parameters
    ----------
    signal : DailySignal
    flags : array-like of bool
        Per-day flags, True meaning the day passed the quality check.
    """
    flags = np.asarray(flags, dtype=bool)
    if flags.shape != signal.values.shape:
        raise ValueError(
            f"flags length {flags.size} does not match signal length {len(signal)}"
        )
    values = np.where(flags, signal.values, np.nan)
    if np.all(np.isnan(values)):
        raise ValueError("empty known set")
    return replace(signal, values=values)


def scale_p95(signal):
    """Scale a daily signal so the 95th percentile of known values is 1.

    The percentile uses sorted-order linear interpolation (numpy's
    default), recorded here so results are reproducible bit-for-bit.
    Missing entries are unchanged; the divisor is accumulated in
    ``scale``.
    """
    known = signal.known_set
    if known.size == 0:
        raise ValueError("empty known set")
    p95 = float(np.percentile(signal.values[known], 95.0))
    if p95 <= 0:
        raise ValueError("degenerate signal: 95th percentile is not positive")
    return replace(
        signal,
        values=signal.values / p95,
        scale=signal.scale * p95,
        is_normalized=True,
    )


def _parse_float(text):
    text = text.strip()
    if text == "" or text.lower() == "nan":
        return np.nan
    return float(text)


def read_power_csv(path):
    """Read a ``timestamp,power`` CSV into a :class:`PowerSeries`.

    Header is required; timestamps are ISO-8601; blank or ``NaN`` power
    entries mark missing samples.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        cols = [c.strip().lower() for c in header]
        if cols[:2] != ["timestamp", "power"]:
            raise ValueError(f"{path}: expected header 'timestamp,power'")
        ts, vals = [], []
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            ts.append(np.datetime64(row[0].strip()))
            vals.append(_parse_float(row[1]) if len(row) > 1 else np.nan)
    if not ts:
        raise ValueError("no data")
    ts = np.array(ts, dtype="datetime64[s]")
    if ts.size >= 2:
        deltas = np.diff(ts)
        step = deltas[0]
        if step <= np.timedelta64(0, "s") or not np.all(deltas == step):
            raise ValueError("irregular sampling")
        interval = int(step.astype("timedelta64[s]").astype(int) // 60)
    else:
        interval = 60
    return PowerSeries(timestamps=ts, values=np.array(vals), interval_minutes=interval)


def read_daily_csv(path, is_normalized=False):
    """Read a ``date,energy`` CSV into a :class:`DailySignal`.

    Dates must be strictly increasing; absent dates inside the covered
    range become missing days. Blank or ``NaN`` energies mark missing
    days. ``is_normalized=True`` declares the column to be a
    performance index rather than raw energy.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        dates, vals = [], []
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            dates.append(np.datetime64(row[0].strip(), "D"))
            vals.append(_parse_float(row[1]) if len(row) > 1 else np.nan)
    if not dates:
        raise ValueError("no data")
    dates = np.array(dates, dtype="datetime64[D]")
    if dates.size >= 2 and not np.all(np.diff(dates) > np.timedelta64(0, "D")):
        raise ValueError("dates must be strictly increasing")
    grid = np.arange(dates[0], dates[-1] + 1)
    values = np.full(grid.size, np.nan)
    values[(dates - dates[0]).astype(int)] = vals
    return DailySignal(values=values, dates=grid, is_normalized=is_normalized)


def load_signal_csv(path, is_normalized=False, completeness=DEFAULT_COMPLETENESS):
    """Load either CSV schema into a :class:`DailySignal`.

    ``timestamp,power`` files are integrated to daily energy;
    ``date,<value>`` files bypass integration.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        header = fh.readline()
    if not header.strip():
        raise ValueError(f"{path}: empty file")
    cols = [c.strip().lower() for c in header.split(",")]
    if cols[0] == "timestamp":
        return integrate_daily(read_power_csv(path), completeness=completeness)
    if cols[0] == "date":
        return read_daily_csv(path, is_normalized=is_normalized)
    raise ValueError(f"{path}: unrecognized header {header!r}")
