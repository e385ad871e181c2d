"""Trajectory records, Web Mercator projection, dataset I/O and filters.

Coordinates inside the package are always projected meters. Degrees only
appear in the two on-disk formats:

* format ``jsonl``: one JSON object per line, ``{"id": ..., "coords": [[lon, lat], ...]}``
* format ``csv``: ``id,lon1,lat1,lon2,lat2,...`` per row
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

EARTH_RADIUS = 6378137.0
MAX_LAT = 85.05112878
FORMATS = ("jsonl", "csv")


class ProjectionError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    """An ordered sequence of projected points, ``points`` has shape (n, 2)."""

    id: str
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"trajectory {self.id!r} has non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.id == other.id and np.array_equal(self.points, other.points)

    def with_points(self, points: np.ndarray) -> Trajectory:
        return Trajectory(self.id, points)

    def length_m(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.hypot(*np.diff(self.points, axis=0).T).sum())


def project(lon: float, lat: float) -> tuple[float, float]:
    """Spherical Web Mercator: degrees to meters."""
    if not -180.0 <= lon <= 180.0:
        raise ProjectionError(f"longitude {lon} outside [-180, 180]")
    if not -MAX_LAT < lat < MAX_LAT:
        raise ProjectionError(f"latitude {lat} outside (-{MAX_LAT}, {MAX_LAT})")
    x = EARTH_RADIUS * math.radians(lon)
    y = EARTH_RADIUS * math.log(math.tan(math.pi / 4 + math.radians(lat) / 2))
    return x, y


def unproject(x: float, y: float) -> tuple[float, float]:
    lon = math.degrees(x / EARTH_RADIUS)
    lat = math.degrees(2 * math.atan(math.exp(y / EARTH_RADIUS)) - math.pi / 2)
    return lon, lat


def project_array(lonlat: np.ndarray) -> np.ndarray:
    lonlat = np.asarray(lonlat, dtype=np.float64).reshape(-1, 2)
    lon, lat = lonlat[:, 0], lonlat[:, 1]
    if np.any(np.abs(lon) > 180.0) or np.any(np.abs(lat) >= MAX_LAT) or not np.all(np.isfinite(lonlat)):
        raise ProjectionError("coordinates outside the projectable range")
    x = EARTH_RADIUS * np.radians(lon)
    y = EARTH_RADIUS * np.log(np.tan(np.pi / 4 + np.radians(lat) / 2))
    return np.stack([x, y], axis=1)


def unproject_array(xy: np.ndarray) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    lon = np.degrees(xy[:, 0] / EARTH_RADIUS)
    lat = np.degrees(2 * np.arctan(np.exp(xy[:, 1] / EARTH_RADIUS)) - np.pi / 2)
    return np.stack([lon, lat], axis=1)


# ------------------------------------------------------------------ I/O


@dataclass
class RecordError:
    line: int
    message: str


@dataclass
class LoadResult:
    trajectories: list[Trajectory]
    errors: list[RecordError] = field(default_factory=list)

    def __iter__(self):
        return iter(self.trajectories)

    def __len__(self) -> int:
        return len(self.trajectories)


def _parse_jsonl(line: str) -> tuple[str, list]:
    rec = json.loads(line)
    if not isinstance(rec, dict) or "id" not in rec or "coords" not in rec:
        raise DatasetError("record needs 'id' and 'coords'")
    coords = rec["coords"]
    if not isinstance(coords, list) or not all(isinstance(c, list) and len(c) == 2 for c in coords):
        raise DatasetError("'coords' must be a list of [lon, lat] pairs")
    return str(rec["id"]), coords


def _parse_csv(row: list[str]) -> tuple[str, list]:
    if len(row) < 1 or (len(row) - 1) % 2:
        raise DatasetError("row needs an id followed by lon,lat pairs")
    vals = row[1:]
    return row[0], [[vals[i], vals[i + 1]] for i in range(0, len(vals), 2)]


def _to_points(coords: list) -> np.ndarray:
    arr = np.empty((len(coords), 2), dtype=np.float64)
    for i, (lon, lat) in enumerate(coords):
        if isinstance(lon, bool) or isinstance(lat, bool):
            raise DatasetError(f"coordinate {i} is not numeric")
        try:
            arr[i] = float(lon), float(lat)
        except (TypeError, ValueError):
            raise DatasetError(f"coordinate {i} is not numeric: {lon!r}, {lat!r}") from None
    if len(arr) == 0:
        return arr
    try:
        return project_array(arr)
    except ProjectionError as e:
        raise DatasetError(str(e)) from None


def load_dataset(path: str | Path, fmt: str = "jsonl") -> LoadResult:
    """Read trajectories in file order; bad records are reported, not fatal."""
    if fmt not in FORMATS:
        raise DatasetError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e

    result = LoadResult([])
    if fmt == "jsonl":
        rows = ((i, line) for i, line in enumerate(text.splitlines(), 1) if line.strip())
        parse = _parse_jsonl
    else:
        rows = ((i, row) for i, row in enumerate(csv.reader(text.splitlines()), 1) if row)
        parse = _parse_csv
    for lineno, raw in rows:
        try:
            tid, coords = parse(raw)
            result.trajectories.append(Trajectory(tid, _to_points(coords)))
        except (DatasetError, json.JSONDecodeError, ValueError) as e:
            result.errors.append(RecordError(lineno, str(e)))
    for err in result.errors:
        log.warning("%s:%d: skipped record: %s", path, err.line, err.message)
    return result


def dumps_trajectory(t: Trajectory) -> str:
    """Canonical format-A line: fixed key order, 7 decimals in degrees."""
    lonlat = unproject_array(t.points) if len(t) else np.empty((0, 2))
    coords = ",".join(f"[{lon:.7f},{lat:.7f}]" for lon, lat in lonlat)
    return f'{{"id":{json.dumps(t.id)},"coords":[{coords}]}}'


def save_dataset(trajs: Iterable[Trajectory], path: str | Path, fmt: str = "jsonl") -> None:
    path = Path(path)
    if fmt == "jsonl":
        lines = [dumps_trajectory(t) for t in trajs]
    elif fmt == "csv":
        lines = []
        for t in trajs:
            ll = unproject_array(t.points) if len(t) else np.empty((0, 2))
            lines.append(",".join([t.id] + [f"{v:.7f}" for v in ll.ravel()]))
    else:
        raise DatasetError(f"unknown format {fmt!r}")
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# ---------------------------------------------------------- preprocessing


def preprocess_filter(trajs: Sequence[Trajectory], min_pts: int = 20, max_pts: int = 200) -> list[Trajectory]:
    if min_pts < 2 or max_pts < min_pts:
        raise ValueError(f"need 2 <= min_pts <= max_pts, got {min_pts}, {max_pts}")
    return [t for t in trajs if min_pts <= len(t) <= max_pts]


@dataclass(frozen=True)
class DatasetStats:
    count: int
    min_points: int
    max_points: int
    mean_points: float
    min_length_km: float
    max_length_km: float
    mean_length_km: float


def dataset_stats(trajs: Sequence[Trajectory]) -> DatasetStats:
    if not trajs:
        raise ValueError("dataset_stats needs at least one trajectory")
    npts = np.array([len(t) for t in trajs])
    km = np.array([t.length_m() for t in trajs]) / 1000.0
    return DatasetStats(
        count=len(trajs),
        min_points=int(npts.min()),
        max_points=int(npts.max()),
        mean_points=float(npts.mean()),
        min_length_km=float(km.min()),
        max_length_km=float(km.max()),
        mean_length_km=float(km.mean()),
    )


def bbox(trajs: Sequence[Trajectory]) -> tuple[float, float, float, float]:
    """(min_x, min_y, max_x, max_y) over all points."""
    allp = np.concatenate([t.points for t in trajs])
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])
