"""Quantile-level recalibration: fit observed coverage on validation data and
remap requested levels through its inverse."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import FormatError

CALMAP_HEADER = "# QGW-CALMAP v1"
DEFAULT_GRID = np.round(np.arange(1, 20) * 0.05, 10)


def empirical_coverage(pred_quantile, targets, mask=None) -> float:
    """Fraction of observed targets at or below the predicted quantile."""
    pred_quantile = np.asarray(pred_quantile, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    pred_quantile, targets, mask = np.broadcast_arrays(pred_quantile, targets, np.asarray(mask, bool))
    n = mask.sum()
    if n == 0:
        raise ValueError("no observed targets to measure coverage on")
    return float(((targets <= pred_quantile) & mask).sum() / n)


def isotonic_regression(y, w=None) -> np.ndarray:
    """Least-squares nondecreasing fit by pooling adjacent violators."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    means, weights, sizes = [], [], []
    for yi, wi in zip(y, w):
        means.append(yi)
        weights.append(wi)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, s2 = means.pop(), weights.pop(), sizes.pop()
            wt = weights[-1] + w2
            means[-1] = (means[-1] * weights[-1] + m2 * w2) / wt
            weights[-1] = wt
            sizes[-1] += s2
    return np.repeat(means, sizes)


@dataclass(frozen=True)
class CalibrationMap:
    """Nominal grid (0 and 1 included) and the monotone coverage seen at each level."""

    tau_grid: np.ndarray
    coverage: np.ndarray

    def __post_init__(self):
        g, c = np.asarray(self.tau_grid, float), np.asarray(self.coverage, float)
        if g.shape != c.shape or g.ndim != 1 or len(g) < 2:
            raise ValueError("grid and coverage must be equal-length vectors")
        if g[0] != 0 or g[-1] != 1 or np.any(np.diff(g) <= 0):
            raise ValueError("grid must increase strictly from 0 to 1")
        if c[0] != 0 or c[-1] != 1 or np.any(np.diff(c) < 0):
            raise ValueError("coverage must be nondecreasing from 0 to 1")
        object.__setattr__(self, "tau_grid", g)
        object.__setattr__(self, "coverage", c)

    def remap(self, taus) -> np.ndarray:
        """tau' = coverage^-1(tau), piecewise linear; flat stretches map to their left end."""
        taus = np.asarray(taus, dtype=np.float64)
        keep = np.concatenate([[True], np.diff(self.coverage) > 0])
        out = np.clip(np.interp(taus, self.coverage[keep], self.tau_grid[keep]), 0.0, 1.0)
        return np.where(taus >= 1.0, 1.0, np.where(taus <= 0.0, 0.0, out))

    def forward(self, taus) -> np.ndarray:
        """Coverage a nominal level actually achieved (inverse of :meth:`remap`)."""
        return np.interp(np.asarray(taus, dtype=np.float64), self.tau_grid, self.coverage)

    @classmethod
    def identity(cls) -> "CalibrationMap":
        return cls(np.array([0.0, 1.0]), np.array([0.0, 1.0]))


def calibration_map_from_coverage(grid, raw_coverage) -> CalibrationMap:
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(grid) <= 0) or grid[0] <= 0 or grid[-1] >= 1:
        raise ValueError("calibration grid must be strictly ascending inside (0, 1)")
    smooth = np.clip(isotonic_regression(raw_coverage), 0.0, 1.0)
    return CalibrationMap(np.concatenate([[0.0], grid, [1.0]]), np.concatenate([[0.0], smooth, [1.0]]))


def fit_calibration(predict: Callable[[float], np.ndarray], targets, mask=None,
                    tau_grid=DEFAULT_GRID) -> CalibrationMap:
    """``predict(tau)`` returns the tau-quantile forecast for every target."""
    targets = np.asarray(targets, dtype=np.float64)
    n = targets.size if mask is None else int(np.asarray(mask, bool).sum())
    if n < 10:
        raise ValueError(f"insufficient calibration data: {n} observed targets, need >= 10")
    raw = [empirical_coverage(predict(float(t)), targets, mask) for t in tau_grid]
    return calibration_map_from_coverage(tau_grid, raw)


def apply_calibration(cmap: CalibrationMap, taus) -> np.ndarray:
    return cmap.remap(taus)


def save_calibration(path, cmap: CalibrationMap) -> None:
    remapped = cmap.remap(cmap.tau_grid)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(CALMAP_HEADER + "\n")
        w = csv.writer(fh)
        w.writerow(["tau_nominal", "coverage", "tau_remapped"])
        for t, c, r in zip(cmap.tau_grid, cmap.coverage, remapped):
            w.writerow([repr(float(t)), repr(float(c)), repr(float(r))])


def load_calibration(path) -> CalibrationMap:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != CALMAP_HEADER:
        raise FormatError(f"{path}:1: expected '{CALMAP_HEADER}'")
    rows = list(csv.reader(lines[1:]))
    if not rows or rows[0] != ["tau_nominal", "coverage", "tau_remapped"]:
        raise FormatError(f"{path}:2: expected header tau_nominal,coverage,tau_remapped")
    try:
        grid = [float(r[0]) for r in rows[1:]]
        cov = [float(r[1]) for r in rows[1:]]
    except (ValueError, IndexError):
        raise FormatError(f"{path}: malformed row") from None
    try:
        return CalibrationMap(np.array(grid), np.array(cov))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
