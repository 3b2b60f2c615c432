from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qgwnet.data import (ExtractionParams, GridMovie, SplitSpec, TrafficSeries, chronological_split,
                         density_mask, extract_graph_from_grid, greedy_equidistant, impute_inputs,
                         load_csv_series, load_grid, load_series, make_windows, save_grid,
                         save_series, select_sensor_pixels, value_density, zscore_normalize)
from qgwnet.errors import EmptyResultError, FormatError
from qgwnet.graph import save_graph


def brute_greedy(points, d_min):
    acc = []
    for i, p in enumerate(points):
        if all(np.hypot(*(p - points[j])) >= d_min for j in acc):
            acc.append(i)
    return acc


def random_series(rng, t=30, n=4, c=2, missing=0.2):
    vals = rng.normal(50, 10, size=(t, n, c)).astype(np.float32)
    return TrafficSeries(vals, rng.random((t, n, c)) >= missing, 5, datetime(2019, 6, 3, 7, 5))


def test_series_round_trip(tmp_path, rng):
    for shape in [(1, 1, 1), (17, 3, 2), (5, 9, 3)]:
        s = random_series(rng, *shape)
        save_series(tmp_path / "s.bin", s)
        r = load_series(tmp_path / "s.bin")
        assert r.values.tobytes() == s.values.tobytes()
        assert np.array_equal(r.mask, s.mask)
        assert r.start == s.start and r.interval_minutes == 5
    head = (tmp_path / "s.bin").read_bytes().split(b"\n")[:6]
    assert head == [b"QGW-SERIES v1", b"N 9", b"T 5", b"C 3", b"interval_min 5",
                    b"start 2019-06-03T07:05:00"]


def test_series_errors(tmp_path, rng):
    with pytest.raises(ValueError, match="empty series"):
        TrafficSeries(np.zeros((0, 2, 1)), np.zeros((0, 2, 1), bool))
    p = tmp_path / "s.bin"
    p.write_bytes(b"QGW-SERIES v1\nN 2\nT 0\nC 1\ninterval_min 5\nstart 2012-03-01T00:00:00\n")
    with pytest.raises(FormatError, match="empty series"):
        load_series(p)
    save_series(p, random_series(rng))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError, match="truncated at byte"):
        load_series(p)
    with pytest.raises(FormatError, match="no such file"):
        load_series(tmp_path / "nope")


def test_missing_fraction_table_shaped(rng):
    t, n = 2000, 207
    mask = rng.random((t, n, 1)) >= 0.08
    s = TrafficSeries(rng.normal(size=(t, n, 1)), mask)
    assert abs(s.missing_fraction() - 0.08) < 0.005
    assert np.all(s.values[~s.mask] == 0)


def test_csv_import(tmp_path):
    p = tmp_path / "x.csv"
    t0 = datetime(2012, 3, 1)
    rows = ["timestamp,node_id,channel,value"]
    for i in (0, 1, 3):
        rows.append(f"{(t0 + timedelta(minutes=5 * i)).isoformat()},7,0,{i + 0.5}")
    rows.append(f"{t0.isoformat()},2,0,9")
    p.write_text("\n".join(rows) + "\n")
    s, ids = load_csv_series(p)
    assert list(ids) == [2, 7] and s.shape == (4, 2, 1)
    assert s.mask[:, 1, 0].tolist() == [True, True, False, True]
    assert s.values[3, 1, 0] == 3.5
    p.write_text("time,node,value\n")
    with pytest.raises(FormatError):
        load_csv_series(p)


def test_zscore():
    s = TrafficSeries(np.full((10, 2, 1), 7.0), np.ones((10, 2, 1), bool))
    norm, stats = zscore_normalize(s, (0, 10))
    assert np.all(norm == 0)
    vals = np.array([6.0, 8.0, 14.0] * 4, dtype=np.float32).reshape(12, 1, 1)
    vals[:, 0, 0] = [8, 12] * 6
    s = TrafficSeries(vals, np.ones_like(vals, bool))
    norm, stats = zscore_normalize(s, (0, 12))
    assert stats.mean[0] == 10 and stats.std[0] == 2
    assert stats.normalize(np.array([14.0]))[0] == 2.0


def test_zscore_round_trip_and_train_only(rng):
    s = random_series(rng, 40)
    norm, stats = zscore_normalize(s, (0, 28))
    back = stats.denormalize(norm)
    assert np.abs(back[s.mask] - s.values[s.mask]).max() < 1e-9
    v2 = s.values.copy()
    v2[28:] = rng.normal(size=v2[28:].shape)
    _, stats2 = zscore_normalize(TrafficSeries(v2, s.mask), (0, 28))
    assert stats.mean.tobytes() == stats2.mean.tobytes() and stats.std.tobytes() == stats2.std.tobytes()


def test_split_examples():
    assert chronological_split(100, SplitSpec(0.7, 0.1, 0.2)) == ((0, 70), (70, 80), (80, 100))
    tr, va, te = chronological_split(10, SplitSpec(0.89, 0.01, 0.10))
    assert va[1] - va[0] == 1 and te[1] - te[0] == 1 and tr == (0, 8)
    with pytest.raises(ValueError, match="empty split"):
        SplitSpec(1.0, 0.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(50, 5000), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
def test_split_never_leaks(t, a, b):
    if a + b >= 0.95:
        return
    tr, va, te = chronological_split(t, SplitSpec(a, b, 1 - a - b))
    assert tr[0] == 0 and te[1] == t
    assert tr[1] - 1 < va[0] and va[1] - 1 < te[0]
    assert tr[1] == va[0] and va[1] == te[0]


def test_windows(rng):
    s = random_series(rng, 12, 2, 1, missing=0.3)
    norm, stats = zscore_normalize(s, (0, 12))
    ds = make_windows(norm, s, 2, 1, (3, 8), stats)
    assert len(ds) == 3
    assert np.array_equal(ds.origins, [4, 5, 6])
    for k, o in enumerate(ds.origins):
        assert np.array_equal(ds.target_mask[k, 0], s.mask[o + 1])
        assert np.array_equal(ds.raw_targets[k, 0], s.values[o + 1])
    assert len(make_windows(norm, s, 3, 2, (0, 5), stats)) == 1
    with pytest.raises(ValueError):
        make_windows(norm, s, 3, 2, (0, 4), stats)


def test_impute():
    x = np.arange(8.0).reshape(4, 2)
    assert np.array_equal(impute_inputs(x, np.ones((4, 2), bool)), x)
    v = np.array([9.0, 5.0, 7.0, 1.0])
    m = np.array([False, True, False, False])
    assert np.array_equal(impute_inputs(v, m), [0, 5, 5, 5])
    assert np.array_equal(impute_inputs(v, np.zeros(4, bool)), np.zeros(4))


def test_grid_round_trip_and_errors(tmp_path, rng):
    movie = GridMovie(rng.integers(0, 256, size=(3, 5, 4, 2), dtype=np.uint8), 100.0)
    save_grid(tmp_path / "g.txt", movie)
    back = load_grid(tmp_path / "g.txt")
    assert np.array_equal(back.frames, movie.frames) and back.meters_per_pixel == 100.0
    (tmp_path / "g.u8").write_bytes(b"\0" * 7)
    with pytest.raises(FormatError, match="expected 120 bytes"):
        load_grid(tmp_path / "g.txt")
    with pytest.raises(FormatError, match="nope.txt"):
        load_grid(tmp_path / "nope.txt")


def test_all_zero_movie_is_empty():
    with pytest.raises(EmptyResultError):
        extract_graph_from_grid(GridMovie(np.zeros((4, 6, 6, 2), np.uint8)))


def test_uniform_grid_matches_brute_force():
    frames = np.full((2, 10, 10, 2), 200, np.uint8)
    params = ExtractionParams(d_min_m=200.0)
    g, s = extract_graph_from_grid(GridMovie(frames, 100.0), params)
    rc = np.argwhere(np.ones((10, 10), bool))
    pts = rc[:, ::-1] * 100.0
    want = pts[brute_greedy(pts, 200.0)]
    assert np.array_equal(g.coords, want)
    assert s.shape == (2, len(want), 1) and np.all(s.values == 200)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.5, 6.0))
def test_greedy_matches_brute_force_property(seed, d_min):
    pts = np.random.default_rng(seed).uniform(0, 20, size=(60, 2))
    got = greedy_equidistant(pts, d_min)
    assert got.tolist() == brute_greedy(pts, d_min)
    acc = pts[got]
    d = np.hypot(*(acc[:, None] - acc[None]).transpose(2, 0, 1))
    assert np.all(d[~np.eye(len(acc), dtype=bool)] >= d_min)


def test_density_thresholds():
    dens = np.zeros((40, 40))
    dens[20, 20] = 0.3      # centre, below 1/2
    dens[20, 21] = 0.6      # centre, passes
    dens[0, 0] = 0.07       # outskirts, passes 1/16
    dens[39, 0] = 0.05      # outskirts, fails
    m = density_mask(dens, 100.0, ExtractionParams(centre_radius_m=500.0))
    assert set(map(tuple, np.argwhere(m))) == {(20, 21), (0, 0)}
    frames = np.zeros((16, 2, 2, 2), np.uint8)
    frames[:4, 0, 0, 1] = 9
    assert value_density(frames, 1)[0, 0] == 0.25


def berlin_like_density(seed=0):
    h, w = 495, 436
    rng = np.random.default_rng(seed)
    r, c = np.mgrid[0:h, 0:w]
    dist = np.hypot(r - h / 2, c - w / 2) * 100
    dens = np.zeros((h, w))
    # street grid: tight blocks in the core, sparse arterials further out
    for spacing, radius in [(4, 8000), (10, 16000), (25, 30000)]:
        road = ((r % spacing == 0) | (c % spacing == 0)) & (dist < radius)
        dens = np.maximum(dens, road * np.clip(1 - dist / 30000, 0.05, 1))
    return np.where(dens > 0, np.clip(dens * rng.uniform(0.5, 1.5, dens.shape), 0, 1), 0)


def test_city_scale_node_count(tmp_path):
    dens = berlin_like_density()
    rng = np.random.default_rng(1)
    frames = np.zeros((16, 495, 436, 2), np.uint8)
    frames[..., 1] = (rng.random((16, 495, 436)) < dens) * 40
    movie = GridMovie(frames, 100.0)
    g, s = extract_graph_from_grid(movie)
    assert 1000 <= g.num_nodes <= 1700
    # deterministic for fixed input
    g2, _ = extract_graph_from_grid(movie)
    save_graph(tmp_path / "a", g)
    save_graph(tmp_path / "b", g2)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    d = np.hypot(*(g.coords[:, None] - g.coords[None]).transpose(2, 0, 1))
    assert np.all(d[~np.eye(g.num_nodes, dtype=bool)] >= 1200)


def test_select_sensor_pixels_row_major():
    dens = np.zeros((5, 5))
    dens[0, :] = 1.0
    sel = select_sensor_pixels(dens, 100.0, ExtractionParams(d_min_m=200.0))
    assert sel.tolist() == [[0, 0], [0, 2], [0, 4]]
