import math

import numpy as np
import pytest

from trajsim.geo import (DatasetError, ProjectionError, Trajectory, dataset_stats, load_dataset, preprocess_filter,
                         project, project_array, save_dataset, unproject, unproject_array)


def test_projection_origin():
    # tan(pi/4) is a hair below 1 in binary, so y is ~1e-9 m rather than 0
    assert project(0.0, 0.0) == pytest.approx((0.0, 0.0), abs=1e-6)


def test_projection_antimeridian():
    x, y = project(180.0, 0.0)
    assert x == pytest.approx(20037508.342789244, abs=1e-6)  # R * pi, R = 6378137
    assert y == pytest.approx(0.0, abs=1e-9)


def test_projection_roundtrip_porto():
    lon, lat = unproject(*project(-8.61, 41.15))
    assert abs(lon + 8.61) < 1e-6 and abs(lat - 41.15) < 1e-6


def test_projection_roundtrip_random(rng):
    ll = np.column_stack([rng.uniform(-180, 180, 1000), rng.uniform(-85, 85, 1000)])
    back = unproject_array(project_array(ll))
    assert np.abs(back - ll).max() < 1e-6


@pytest.mark.parametrize("lat", [85.06, -85.06, 90.0])
def test_projection_rejects_polar_latitudes(lat):
    with pytest.raises(ProjectionError):
        project(0.0, lat)
    with pytest.raises(ProjectionError):
        project_array([[0.0, lat]])


def test_projection_rejects_bad_longitude():
    with pytest.raises(ProjectionError):
        project(181.0, 0.0)


def test_trajectory_rejects_non_finite():
    with pytest.raises(ValueError):
        Trajectory("x", [[0, 0], [np.nan, 1]])


def test_trajectory_points_are_read_only():
    t = Trajectory("x", [[0, 0], [1, 1]])
    with pytest.raises(ValueError):
        t.points[0, 0] = 5


# ------------------------------------------------------------------ I/O


def test_load_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    res = load_dataset(p)
    assert len(res) == 0 and res.errors == []


def test_load_one_record(tmp_path):
    p = tmp_path / "one.jsonl"
    p.write_text('{"id": "a", "coords": [[-8.61, 41.15], [-8.62, 41.16], [-8.63, 41.17]]}\n')
    res = load_dataset(p)
    assert len(res) == 1 and len(res.trajectories[0]) == 3


def test_load_reports_bad_record_with_line_number(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(
        '{"id": "a", "coords": [[-8.61, 41.15], [-8.62, 41.16]]}\n'
        '{"id": "b", "coords": [[-8.61, "north"], [-8.62, 41.16]]}\n'
        '{"id": "c", "coords": [[-8.61, 41.15], [-8.62, 41.16]]}\n'
    )
    res = load_dataset(p)
    assert [t.id for t in res] == ["a", "c"]
    assert len(res.errors) == 1 and res.errors[0].line == 2


def test_load_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,-8.61,41.15,-8.62,41.16\nb,-8.61,41.15,oops,41.16\n")
    res = load_dataset(p, "csv")
    assert [t.id for t in res] == ["a"]
    assert res.errors[0].line == 2


def test_load_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope.jsonl")


@pytest.mark.parametrize("fmt", ["jsonl", "csv"])
def test_reserialization_is_byte_identical(tmp_path, rng, fmt):
    lonlat = [np.column_stack([rng.uniform(-8.7, -8.5, 30), rng.uniform(41.1, 41.2, 30)]) for _ in range(20)]
    trajs = [Trajectory(f"t{i}", project_array(ll)) for i, ll in enumerate(lonlat)]
    a, b = tmp_path / f"a.{fmt}", tmp_path / f"b.{fmt}"
    save_dataset(trajs, a, fmt)
    save_dataset(load_dataset(a, fmt).trajectories, b, fmt)
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------- preprocessing


def _of_len(n):
    return Trajectory(f"n{n}", np.column_stack([np.arange(n), np.zeros(n)]).astype(float))


def test_filter_bounds():
    kept = preprocess_filter([_of_len(n) for n in (19, 20, 200, 201)])
    assert [len(t) for t in kept] == [20, 200]


def test_filter_empty_and_identity():
    assert preprocess_filter([]) == []
    ts = [_of_len(n) for n in (25, 30, 21)]
    assert preprocess_filter(ts) == ts


def test_filter_is_subsequence(rng):
    ts = [_of_len(int(n)) for n in rng.integers(2, 300, 200)]
    kept = preprocess_filter(ts, 20, 200)
    it = iter(ts)
    assert all(any(k is t for t in it) for k in kept)
    assert all(20 <= len(t) <= 200 for t in kept)


def test_filter_rejects_bad_bounds():
    with pytest.raises(ValueError):
        preprocess_filter([], 1, 5)
    with pytest.raises(ValueError):
        preprocess_filter([], 20, 10)


# ------------------------------------------------------------------ stats


def test_stats_345():
    st = dataset_stats([Trajectory("a", [[0, 0], [3000, 4000]])])
    assert st.mean_length_km == pytest.approx(5.0)
    assert st.mean_points == 2


def test_stats_identical():
    t = Trajectory("a", [[0, 0], [10, 0], [10, 10]])
    st = dataset_stats([t, t])
    assert st.min_points == st.max_points == st.mean_points
    assert st.min_length_km == st.max_length_km == st.mean_length_km


def test_stats_match_brute_force(walk, rng):
    ts = [walk(int(rng.integers(2, 60))) for _ in range(100)]
    st = dataset_stats(ts)
    counts, lengths = [], []
    for t in ts:
        counts.append(len(t.points))
        total = 0.0
        for (x0, y0), (x1, y1) in zip(t.points[:-1], t.points[1:]):
            total += math.sqrt((x1 - x0) ** 2 + (y1 - y0) ** 2)
        lengths.append(total / 1000.0)
    assert st.count == 100
    assert (st.min_points, st.max_points) == (min(counts), max(counts))
    assert st.mean_points == pytest.approx(sum(counts) / 100)
    assert st.min_length_km == pytest.approx(min(lengths), rel=1e-12)
    assert st.max_length_km == pytest.approx(max(lengths), rel=1e-12)
    assert st.mean_length_km == pytest.approx(sum(lengths) / 100, rel=1e-12)
    assert st.min_points <= st.mean_points <= st.max_points


def test_stats_empty():
    with pytest.raises(ValueError):
        dataset_stats([])
