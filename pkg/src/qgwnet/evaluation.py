"""Horizon metrics, calibration curves, crossing diagnostics and the two
non-learned baselines (weekly historical average, last-value persistence)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .calibration import empirical_coverage
from .data import TrafficSeries
from .model import QuantileForecast

REPORT_HEADER = "# QGW-REPORT v1"
CURVE_HEADER = "# QGW-CURVE v1"
REPORT_HORIZONS_MIN = (15, 30, 60)
MINUTES_PER_WEEK = 7 * 24 * 60


@dataclass
class HorizonMetrics:
    step: int
    minutes: int
    mae: float
    mse: float
    count: int


def report_steps(horizon: int, interval_minutes: int = 5) -> list[int]:
    """Steps for the 15/30/60-minute columns that fit inside ``horizon``."""
    steps = [m // interval_minutes for m in REPORT_HORIZONS_MIN if m // interval_minutes <= horizon]
    return steps or [horizon]


def mae_mse_by_horizon(pred, target, mask, horizon_steps, interval_minutes: int = 5
                       ) -> list[HorizonMetrics]:
    """Masked MAE/MSE at single horizon steps (1-based); arrays are (..., Q, N, C)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.ones(target.shape, bool) if mask is None else np.asarray(mask, bool)
    q = pred.shape[-3]
    rows = []
    for step in horizon_steps:
        if not 1 <= step <= q:
            raise ValueError(f"horizon step {step} outside 1..{q}")
        e = (pred[..., step - 1, :, :] - target[..., step - 1, :, :])
        m = mask[..., step - 1, :, :]
        n = int(m.sum())
        if n == 0:
            raise ValueError(f"no observed targets at horizon step {step}")
        rows.append(HorizonMetrics(step, step * interval_minutes, float(np.abs(e)[m].mean()),
                                   float((e * e)[m].mean()), n))
    return rows


def crossing_rate(forecast: QuantileForecast) -> float:
    """Fraction of cells where some higher level is forecast below a lower one."""
    if len(forecast.taus) < 2:
        raise ValueError("crossing rate needs at least 2 tau levels")
    v = forecast.values
    crossed = (np.diff(v, axis=0) < 0).any(axis=0)
    return float(crossed.mean())


def sort_quantiles(forecast: QuantileForecast) -> QuantileForecast:
    """Per-cell monotone rearrangement across levels."""
    return QuantileForecast(forecast.taus, np.sort(forecast.values, axis=0))


def interval_widths(forecast: QuantileForecast, lower: float, upper: float) -> dict[str, float]:
    w = forecast.at(upper) - forecast.at(lower)
    return {"mean": float(w.mean()), "median": float(np.median(w)), "min": float(w.min()),
            "max": float(w.max())}


# -------------------------------------------------------------- baselines


def weekly_slots(series: TrafficSeries) -> np.ndarray:
    """Day-of-week x time-of-day slot of each step."""
    start = series.start
    offset = start.weekday() * 24 * 60 + start.hour * 60 + start.minute
    minutes = offset + np.arange(series.num_steps) * series.interval_minutes
    return (minutes % MINUTES_PER_WEEK) // series.interval_minutes


def historical_average(series: TrafficSeries, train_range: tuple[int, int],
                       target_range: tuple[int, int]) -> np.ndarray:
    """Weekly-slot means of the training range, for each step of ``target_range``.

    The prediction for a time does not depend on how far ahead it is asked
    for. Slots never observed in training fall back to the channel's training
    mean.
    """
    a, b = train_range
    if (b - a) * series.interval_minutes < MINUTES_PER_WEEK:
        raise ValueError("historical average needs at least one week of training data")
    slots = weekly_slots(series)
    n_slots = MINUTES_PER_WEEK // series.interval_minutes
    vals = series.values[a:b].astype(np.float64)
    m = series.mask[a:b]
    sums = np.zeros((n_slots,) + vals.shape[1:])
    counts = np.zeros_like(sums)
    np.add.at(sums, slots[a:b], vals * m)
    np.add.at(counts, slots[a:b], m)
    overall = (vals * m).sum(axis=(0, 1)) / np.maximum(m.sum(axis=(0, 1)), 1)
    table = np.where(counts > 0, sums / np.maximum(counts, 1), overall)
    lo, hi = target_range
    return table[slots[lo:hi]]


def historical_average_windows(series: TrafficSeries, train_range, origins, horizon: int) -> np.ndarray:
    """Historical average laid out like windowed targets, (S, Q, N, C)."""
    full = historical_average(series, train_range, (0, series.num_steps))
    idx = np.asarray(origins)[:, None] + np.arange(1, horizon + 1)[None, :]
    return full[idx]


def carried_forward(series: TrafficSeries, fallback=None) -> np.ndarray:
    """LOCF over the whole history; steps before a first reading use ``fallback``."""
    v = series.values.astype(np.float64)
    m = series.mask
    idx = np.where(m, np.arange(series.num_steps)[:, None, None], -1)
    last = np.maximum.accumulate(idx, axis=0)
    out = np.take_along_axis(v, np.maximum(last, 0), axis=0)
    if fallback is None:
        fallback = (v * m).sum(axis=(0, 1)) / np.maximum(m.sum(axis=(0, 1)), 1)
    return np.where(last >= 0, out, fallback)


def static_prediction(series: TrafficSeries, origins, horizon: int, fallback=None) -> np.ndarray:
    """Last observed value at each origin, repeated over ``horizon`` steps: (S, Q, N, C)."""
    locf = carried_forward(series, fallback)[np.asarray(origins)]
    return np.repeat(locf[:, None], horizon, axis=1)


# ------------------------------------------------------------ calibration


def calibration_curve(predict: Callable[[float], np.ndarray], targets, mask, tau_grid
                      ) -> list[tuple[float, float]]:
    """(tau, observed coverage) for each level; ``predict(tau)`` gives the forecast."""
    return [(float(t), empirical_coverage(predict(float(t)), targets, mask)) for t in tau_grid]


def max_calibration_error(curve) -> float:
    return max(abs(c - t) for t, c in curve)


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    dataset: str
    model: str
    horizons: list[HorizonMetrics]
    curves: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    crossing: float | None = None
    widths: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        for h in self.horizons:
            if h.mae ** 2 > h.mse * (1 + 1e-12) + 1e-300:
                raise ValueError(f"MAE^2 > MSE at step {h.step}; metrics are inconsistent")


def write_report_csv(path, reports: list[MetricsReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(REPORT_HEADER + "\n")
        w = csv.writer(fh)
        w.writerow(["dataset", "model", "horizon_min", "mae", "mse"])
        for r in reports:
            for h in r.horizons:
                w.writerow([r.dataset, r.model, h.minutes, repr(h.mae), repr(h.mse)])


def read_report_csv(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != REPORT_HEADER:
        raise ValueError(f"{path}: expected '{REPORT_HEADER}'")
    return [
        {**r, "horizon_min": int(r["horizon_min"]), "mae": float(r["mae"]), "mse": float(r["mse"])}
        for r in csv.DictReader(lines[1:])
    ]


def write_curve_csv(path, curves: dict[str, list[tuple[float, float]]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(CURVE_HEADER + "\n")
        w = csv.writer(fh)
        w.writerow(["tau", "coverage", "phase"])
        for phase, pts in curves.items():
            for t, c in pts:
                w.writerow([repr(t), repr(c), phase])

