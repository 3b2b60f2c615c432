"""Series storage, normalization, splitting, windowing and grid-to-graph extraction."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import EmptyResultError, FormatError
from .graph import SensorGraph
from .model import NormStats

SERIES_HEADER = "QGW-SERIES v1"
GRID_HEADER = "QGW-GRID v1"
DEFAULT_START = datetime(2012, 3, 1)


@dataclass
class TrafficSeries:
    """Measurements (T, N, C) in original units; masked entries hold 0."""

    values: np.ndarray
    mask: np.ndarray
    interval_minutes: int = 5
    start: datetime = DEFAULT_START

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 3 or self.values.shape != self.mask.shape:
            raise ValueError(f"values {self.values.shape} and mask {self.mask.shape} must be equal (T, N, C)")
        if self.values.shape[0] == 0:
            raise ValueError("empty series")
        self.values = np.where(self.mask, self.values, np.float32(0))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def num_channels(self) -> int:
        return self.values.shape[2]

    def missing_fraction(self) -> float:
        return 1.0 - float(self.mask.mean())

    def timestamps(self) -> list[datetime]:
        step = timedelta(minutes=self.interval_minutes)
        return [self.start + i * step for i in range(self.num_steps)]


# ---------------------------------------------------------------- series io


def save_series(path, s: TrafficSeries) -> None:
    t, n, c = s.shape
    head = (
        f"{SERIES_HEADER}\nN {n}\nT {t}\nC {c}\ninterval_min {s.interval_minutes}\n"
        f"start {s.start.isoformat()}\n"
    )
    payload = s.values.astype("<f4").tobytes() + np.packbits(s.mask.reshape(-1)).tobytes()
    Path(path).write_bytes(head.encode("utf-8") + payload)


def load_series(path) -> TrafficSeries:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: no such file") from None
    pos = 0
    fields = {}
    expected = [None, "N", "T", "C", "interval_min", "start"]
    for key in expected:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: truncated header at byte {pos}")
        text = raw[pos:end].decode("utf-8", errors="replace")
        if key is None:
            if text != SERIES_HEADER:
                raise FormatError(f"{path}: expected '{SERIES_HEADER}' at byte {pos}")
        else:
            parts = text.split(" ", 1)
            if len(parts) != 2 or parts[0] != key:
                raise FormatError(f"{path}: expected '{key} <value>' at byte {pos}")
            fields[key] = parts[1].strip()
        pos = end + 1
    try:
        n, t, c = int(fields["N"]), int(fields["T"]), int(fields["C"])
        interval = int(fields["interval_min"])
        start = datetime.fromisoformat(fields["start"])
    except ValueError as exc:
        raise FormatError(f"{path}: bad header value ({exc})") from None
    if t == 0:
        raise FormatError(f"{path}: empty series (T=0)")
    count = t * n * c
    need = 4 * count + (count + 7) // 8
    if len(raw) - pos < need:
        raise FormatError(f"{path}: payload truncated at byte {len(raw)}, expected {pos + need} bytes")
    if len(raw) - pos > need:
        raise FormatError(f"{path}: trailing data after byte {pos + need}")
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float32)
    bits = np.frombuffer(raw, dtype=np.uint8, offset=pos + 4 * count)
    mask = np.unpackbits(bits, count=count).astype(bool)
    return TrafficSeries(values.reshape(t, n, c), mask.reshape(t, n, c), interval, start)


def load_csv_series(path, interval_minutes: int = 5) -> tuple[TrafficSeries, np.ndarray]:
    """Rows ``timestamp,node_id,channel,value``; gaps become masked entries.

    Returns the series and the sorted node ids that index its node axis.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["timestamp", "node_id", "channel", "value"]:
            raise FormatError(f"{path}: header must be timestamp,node_id,channel,value")
        for lineno, r in enumerate(reader, start=2):
            try:
                rows.append((datetime.fromisoformat(r["timestamp"]), int(r["node_id"]),
                             int(r["channel"]), float(r["value"])))
            except (TypeError, ValueError):
                raise FormatError(f"{path}:{lineno}: cannot parse row") from None
    if not rows:
        raise FormatError(f"{path}: empty series")
    start = min(r[0] for r in rows)
    nodes = np.array(sorted({r[1] for r in rows}))
    chans = sorted({r[2] for r in rows})
    step = timedelta(minutes=interval_minutes)
    t = max(int((r[0] - start) / step) for r in rows) + 1
    values = np.zeros((t, len(nodes), len(chans)), dtype=np.float32)
    mask = np.zeros(values.shape, dtype=bool)
    node_pos = {int(k): i for i, k in enumerate(nodes)}
    chan_pos = {k: i for i, k in enumerate(chans)}
    for ts, nid, ch, v in rows:
        offset = (ts - start) / step
        if offset != int(offset):
            raise FormatError(f"{path}: timestamp {ts.isoformat()} is off the {interval_minutes}-minute grid")
        i = int(offset)
        values[i, node_pos[nid], chan_pos[ch]] = v
        mask[i, node_pos[nid], chan_pos[ch]] = True
    return TrafficSeries(values, mask, interval_minutes, start), nodes


# ---------------------------------------------------------- normalization


def zscore_normalize(s: TrafficSeries, train_range: tuple[int, int]) -> tuple[np.ndarray, NormStats]:
    """Per-channel z-score with statistics from unmasked training entries only."""
    a, b = train_range
    if b <= a:
        raise ValueError("training range is empty")
    vals = s.values[a:b].astype(np.float64)
    m = s.mask[a:b]
    counts = m.sum(axis=(0, 1))
    if np.any(counts == 0):
        raise ValueError(f"channel(s) {np.flatnonzero(counts == 0).tolist()} have no training observations")
    mu = (vals * m).sum(axis=(0, 1)) / counts
    var = (((vals - mu) * m) ** 2).sum(axis=(0, 1)) / counts
    stats = NormStats(mu, np.maximum(np.sqrt(var), 1e-6))
    out = stats.normalize(s.values.astype(np.float64))
    return np.where(s.mask, out, 0.0), stats


# ----------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2

    def __post_init__(self):
        ratios = (self.train, self.val, self.test)
        if any(r <= 0 for r in ratios):
            raise ValueError(f"empty split: every ratio must be > 0, got {ratios}")
        if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
            raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")


def chronological_split(num_steps: int, spec: SplitSpec, min_len: int = 1):
    """Contiguous [train | val | test] ranges; val and test get floor(ratio*T)
    (at least 1 step) and train takes the remainder."""
    n_val = max(1, math.floor(spec.val * num_steps + 1e-9))
    n_test = max(1, math.floor(spec.test * num_steps + 1e-9))
    n_train = num_steps - n_val - n_test
    sizes = (n_train, n_val, n_test)
    if min(sizes) < min_len:
        raise ValueError(
            f"series of {num_steps} steps gives split sizes {sizes}; each needs >= {min_len}"
        )
    return (0, n_train), (n_train, n_train + n_val), (n_train + n_val, num_steps)


# ----------------------------------------------------------------- windows


def impute_inputs(values: np.ndarray, mask: np.ndarray, axis: int = 0) -> np.ndarray:
    """Last observation carried forward along ``axis``; leading gaps become 0."""
    v = np.moveaxis(np.asarray(values, dtype=np.float64), axis, 0)
    m = np.moveaxis(np.asarray(mask, dtype=bool), axis, 0)
    idx = np.where(m, np.arange(v.shape[0]).reshape((-1,) + (1,) * (v.ndim - 1)), -1)
    last = np.maximum.accumulate(idx, axis=0)
    filled = np.take_along_axis(v, np.maximum(last, 0), axis=0)
    filled = np.where(last >= 0, filled, 0.0)
    return np.moveaxis(filled, 0, axis)


@dataclass
class WindowedDataset:
    """Samples of (P input steps, Q target steps); ``origins`` index the last input step."""

    inputs: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray
    raw_targets: np.ndarray
    origins: np.ndarray
    stats: NormStats

    def __len__(self) -> int:
        return len(self.origins)


def make_windows(normalized: np.ndarray, s: TrafficSeries, input_len: int, horizon: int,
                 split_range: tuple[int, int], stats: NormStats) -> WindowedDataset:
    a, b = split_range
    length = b - a
    if length < input_len + horizon:
        raise ValueError(f"split of {length} steps is shorter than P+Q = {input_len + horizon}")
    count = length - input_len - horizon + 1
    starts = a + np.arange(count)
    in_idx = starts[:, None] + np.arange(input_len)[None, :]
    out_idx = starts[:, None] + input_len + np.arange(horizon)[None, :]
    inputs = impute_inputs(normalized[in_idx], s.mask[in_idx], axis=1)
    return WindowedDataset(
        inputs=inputs,
        targets=normalized[out_idx],
        target_mask=s.mask[out_idx],
        raw_targets=s.values[out_idx].astype(np.float64),
        origins=starts + input_len - 1,
        stats=stats,
    )


# ------------------------------------------------------------- grid movies


@dataclass
class GridMovie:
    frames: np.ndarray  # (T, H, W, C_px) uint8
    meters_per_pixel: float = 100.0
    interval_minutes: int = 5
    start: datetime = DEFAULT_START

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 4 or self.frames.shape[0] == 0:
            raise ValueError(f"frames must be a nonempty (T, H, W, C) array, got {self.frames.shape}")


def grid_data_path(sidecar) -> Path:
    return Path(sidecar).with_suffix(".u8")


def save_grid(sidecar, movie: GridMovie) -> None:
    t, h, w, c = movie.frames.shape
    Path(sidecar).write_text(
        f"{GRID_HEADER}\nH {h}\nW {w}\nCpx {c}\nframes {t}\nm_per_px {movie.meters_per_pixel!r}\n"
        f"interval_min {movie.interval_minutes}\nstart {movie.start.isoformat()}\n",
        encoding="utf-8",
    )
    grid_data_path(sidecar).write_bytes(movie.frames.tobytes())


def load_grid(sidecar) -> GridMovie:
    sidecar = Path(sidecar)
    if not sidecar.exists():
        raise FormatError(f"{sidecar}: no such file")
    lines = sidecar.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != GRID_HEADER:
        raise FormatError(f"{sidecar}:1: expected header '{GRID_HEADER}'")
    meta = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise FormatError(f"{sidecar}:{lineno}: expected '<key> <value>'")
        meta[parts[0]] = parts[1]
    try:
        h, w, c, t = (int(meta[k]) for k in ("H", "W", "Cpx", "frames"))
        mpp = float(meta["m_per_px"])
        interval = int(meta.get("interval_min", 5))
        start = datetime.fromisoformat(meta["start"]) if "start" in meta else DEFAULT_START
    except KeyError as exc:
        raise FormatError(f"{sidecar}: missing key {exc.args[0]}") from None
    except ValueError as exc:
        raise FormatError(f"{sidecar}: bad value ({exc})") from None
    data = grid_data_path(sidecar)
    if not data.exists():
        raise FormatError(f"{data}: frame data missing")
    raw = data.read_bytes()
    need = t * h * w * c
    if len(raw) != need:
        raise FormatError(f"{data}: expected {need} bytes, found {len(raw)}")
    frames = np.frombuffer(raw, dtype=np.uint8).reshape(t, h, w, c)
    return GridMovie(frames, mpp, interval, start)


# -------------------------------------------------------------- extraction


@dataclass(frozen=True)
class ExtractionParams:
    density_outskirts: float = 1 / 16
    density_centre: float = 1 / 2
    centre_radius_m: float | None = None  # default: quarter of the grid diagonal
    d_min_m: float = 1200.0
    edge_cutoff_m: float = 2500.0
    speed_channel: int = 1


def value_density(frames: np.ndarray, channel: int) -> np.ndarray:
    """Fraction of frames with a nonzero reading, per pixel."""
    if not 0 <= channel < frames.shape[3]:
        raise ValueError(f"speed channel {channel} outside 0..{frames.shape[3] - 1}")
    return (frames[..., channel] > 0).mean(axis=0)


def density_mask(density: np.ndarray, meters_per_pixel: float, params: ExtractionParams) -> np.ndarray:
    """Pixels passing the centre/outskirts density thresholds.

    The centre is the density-weighted centroid of the grid.
    """
    h, w = density.shape
    rows, cols = np.mgrid[0:h, 0:w]
    total = density.sum()
    if total == 0:
        return np.zeros_like(density, dtype=bool)
    cy = (rows * density).sum() / total
    cx = (cols * density).sum() / total
    radius = params.centre_radius_m
    if radius is None:
        radius = 0.25 * math.hypot(h, w) * meters_per_pixel
    dist = np.hypot(rows - cy, cols - cx) * meters_per_pixel
    threshold = np.where(dist <= radius, params.density_centre, params.density_outskirts)
    return (density > 0) & (density >= threshold)


def greedy_equidistant(points: np.ndarray, d_min: float) -> np.ndarray:
    """Scan ``points`` in order, accepting each one at distance >= d_min from
    every accepted point. Returns accepted indices.

    Accepted points are bucketed on a d_min grid, so each candidate is only
    compared with the 3x3 neighbouring buckets.
    """
    points = np.asarray(points, dtype=np.float64)
    if d_min <= 0:
        return np.arange(len(points))
    buckets: dict[tuple[int, int], list[int]] = {}
    accepted = []
    d2 = d_min * d_min
    cell = np.floor(points / d_min).astype(np.int64)
    for i, (p, (bx, by)) in enumerate(zip(points, cell)):
        ok = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for j in buckets.get((bx + dx, by + dy), ()):
                    q = points[j]
                    if (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 < d2:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            accepted.append(i)
            buckets.setdefault((bx, by), []).append(i)
    return np.array(accepted, dtype=np.int64)


def select_sensor_pixels(density: np.ndarray, meters_per_pixel: float,
                         params: ExtractionParams) -> np.ndarray:
    """(row, col) of accepted pixels, in row-major acceptance order."""
    keep = density_mask(density, meters_per_pixel, params)
    rc = np.argwhere(keep)  # row-major
    if rc.size == 0:
        return rc.reshape(0, 2)
    pts = rc[:, ::-1] * meters_per_pixel  # (x, y) metres
    return rc[greedy_equidistant(pts, params.d_min_m)]


def gaussian_edges(coords: np.ndarray, cutoff: float) -> list[tuple[int, int, float]]:
    """Directed edges i != j with d_ij <= cutoff, weight exp(-d^2 / s^2), s the
    std of all those distances."""
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    near = (dist <= cutoff) & ~np.eye(len(coords), dtype=bool)
    if not near.any():
        return []
    sigma = dist[near].std()
    if sigma == 0:
        sigma = dist[near].mean()
    src, dst = np.nonzero(near)
    w = np.exp(-(dist[src, dst] ** 2) / sigma ** 2)
    return [(int(i), int(j), float(v)) for i, j, v in zip(src, dst, w)]


def extract_graph_from_grid(movie: GridMovie, params: ExtractionParams = ExtractionParams()
                            ) -> tuple[SensorGraph, TrafficSeries]:
    density = value_density(movie.frames, params.speed_channel)
    rc = select_sensor_pixels(density, movie.meters_per_pixel, params)
    if len(rc) == 0:
        raise EmptyResultError("no sensors extracted")
    coords = rc[:, ::-1].astype(np.float64) * movie.meters_per_pixel
    ids = np.arange(len(rc))
    graph = SensorGraph.from_edges(ids, coords, gaussian_edges(coords, params.edge_cutoff_m))
    speed = movie.frames[:, rc[:, 0], rc[:, 1], params.speed_channel].astype(np.float32)
    series = TrafficSeries(speed[..., None], speed[..., None] > 0, movie.interval_minutes, movie.start)
    return graph, series
