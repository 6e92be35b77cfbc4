"""Reading and writing the CSV, JSON and YAML files the command line works with.

Dates only exist here: everything past this module works with integer day
indices, day 0 being the first date of the observation file.
"""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .core import PHASES, DiseaseParams, block, index_to_state, new_state, state_dim


class DataError(ValueError):
    """Malformed input file; the message names the file and line."""


def fmt(x) -> str:
    """Shortest text that reads back to the same number."""
    x = float(x)
    if x.is_integer() and abs(x) < 2 ** 53:
        return str(int(x))
    return repr(x)


def _parse_date(text: str, where: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"{where}: bad date {text!r} (expected YYYY-MM-DD)") from None


def _parse_number(text: str, where: str, integer: bool = False) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{where}: bad number {text!r}") from None
    if not np.isfinite(v):
        raise DataError(f"{where}: non-finite value {text!r}")
    if integer and not v.is_integer():
        raise DataError(f"{where}: expected an integer, got {text!r}")
    return v


def _read_rows(path, header: Sequence[str]):
    """Yield ``(line number, row)`` after checking the header."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if [h.strip() for h in first] != list(header):
            raise DataError(f"{path}:1: header must be {','.join(header)}, got {','.join(first)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            yield line, [c.strip() for c in row]


# ---------------------------------------------------------------------------
# observation series


@dataclass(frozen=True)
class ObservationSeries:
    """Daily admissions on consecutive dates; missing days hold NaN."""

    start: dt.date
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=float)
        if c.ndim != 1:
            raise ValueError("counts must be one-dimensional")
        if np.any(c[~np.isnan(c)] < 0):
            raise ValueError("counts must be nonnegative")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    def __len__(self) -> int:
        return self.counts.size

    @property
    def dates(self) -> list[dt.date]:
        return [self.start + dt.timedelta(days=k) for k in range(len(self))]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.counts)

    def day_index(self, date: dt.date | str) -> int:
        if isinstance(date, str):
            date = _parse_date(date, "date")
        k = (date - self.start).days
        if not 0 <= k < len(self):
            raise ValueError(f"{date} is outside {self.start}..{self.dates[-1]}")
        return k

    def __eq__(self, other):
        return (isinstance(other, ObservationSeries) and self.start == other.start
                and np.array_equal(self.counts, other.counts, equal_nan=True))

    __hash__ = None


def load_observations(path) -> ObservationSeries:
    """Read a ``date,count`` CSV; dates missing between neighbours become NaN."""
    seen: dict[dt.date, float] = {}
    prev = None
    for line, (d, c) in _read_rows(path, ("date", "count")):
        where = f"{path}:{line}"
        date = _parse_date(d, where)
        if date in seen:
            raise DataError(f"{where}: duplicate date {date}")
        if prev is not None and date < prev:
            raise DataError(f"{where}: date {date} comes after {prev}")
        count = _parse_number(c, where)
        if count < 0:
            raise DataError(f"{where}: negative count {c}")
        seen[date] = count
        prev = date
    if not seen:
        raise DataError(f"{path}: no observations")
    start = min(seen)
    n = (max(seen) - start).days + 1
    counts = np.full(n, np.nan)
    for date, v in seen.items():
        counts[(date - start).days] = v
    return ObservationSeries(start, counts)


def save_observations(series: ObservationSeries, path) -> None:
    """Write present days only, so gaps stay gaps on reload."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "count"])
        for date, v in zip(series.dates, series.counts):
            if not np.isnan(v):
                w.writerow([date.isoformat(), fmt(v)])


def observations_from_counts(counts: Sequence[float], start: str | dt.date) -> ObservationSeries:
    start = _parse_date(start, "start") if isinstance(start, str) else start
    return ObservationSeries(start, np.asarray(counts, dtype=float))


# ---------------------------------------------------------------------------
# configuration files


def load_structured(path) -> dict:
    """JSON or YAML (chosen by extension, YAML otherwise)."""
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix.lower() == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as err:
        raise DataError(f"{path}: cannot parse ({err})") from None
    if not isinstance(data, dict):
        raise DataError(f"{path}: expected a mapping at the top level")
    return data


def load_params(path) -> DiseaseParams:
    data = load_structured(path)
    try:
        return DiseaseParams.from_dict(data)
    except (KeyError, TypeError, ValueError) as err:
        raise DataError(f"{path}: invalid disease parameters ({err})") from None


def save_params(params: DiseaseParams, path) -> None:
    path = Path(path)
    data = params.to_dict()
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps(data, indent=2) + "\n")
    else:
        path.write_text(yaml.safe_dump(data, sort_keys=False))


def config_hash(data) -> str:
    canon = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(out_dir, command: str, config, seed: int | None,
                   outputs: Iterable[str], started_at: str | None = None) -> Path:
    """``manifest.json`` describing one run."""
    from . import __version__

    started = started_at or dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "seed": seed,
        "started_at": started,
        "outputs": sorted(outputs),
        "versions": {"branchepi": __version__, "numpy": np.__version__},
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (dt.date,)):
        return o.isoformat()
    raise TypeError(f"cannot serialize {type(o).__name__}")


# ---------------------------------------------------------------------------
# trajectories


def write_trajectory_long(path, states: np.ndarray, h: int, extra: Mapping[str, Sequence] | None = None) -> None:
    """One row per ``(t, phase, day)`` with a nonzero value; ``day`` is empty for H."""
    states = np.atleast_2d(states)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "phase", "day", "value"])
        for t, x in enumerate(states):
            for j in np.flatnonzero(x):
                phase, day = index_to_state(int(j), h)
                w.writerow([t, phase, "" if day is None else day, fmt(x[j])])


def read_trajectory_long(path, h: int) -> np.ndarray:
    rows = list(_read_rows(path, ("t", "phase", "day", "value")))
    T = max((int(r[0]) for _, r in rows), default=0)
    out = np.zeros((T + 1, state_dim(h)))
    for line, (t, phase, day, value) in rows:
        x = new_state(h, {(phase, int(day) if day else None): 1.0})
        out[int(t)] += x * _parse_number(value, f"{path}:{line}")
    return out


WIDE_COLUMNS = ("t", "x_H") + tuple(f"sum_{p}" for p in PHASES)


def write_trajectory_wide(path, states: np.ndarray, h: int) -> None:
    """Phase totals per day: ``t, x_H, sum_E, sum_P, sum_I1, sum_A, sum_I2``."""
    states = np.atleast_2d(states)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WIDE_COLUMNS)
        for t, x in enumerate(states):
            w.writerow([t, fmt(x[-1])] + [fmt(x[block(p, h)].sum()) for p in PHASES])


def read_table(path) -> tuple[list[str], np.ndarray]:
    """Numeric CSV with a header row (empty cells read as NaN)."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(c) if c else np.nan for c in r] for r in reader if r]
    return header, np.array(rows, dtype=float).reshape(-1, len(header))


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (int, float, np.integer, np.floating)) and
                        not isinstance(v, bool) else v for v in r])


# ---------------------------------------------------------------------------
# mobility, flows and visits


def load_mobility(path) -> tuple[dt.date, np.ndarray]:
    """``date,outflow_count`` on consecutive days; returns the start date and the values."""
    dates, values = [], []
    for line, (d, v) in _read_rows(path, ("date", "outflow_count")):
        where = f"{path}:{line}"
        date = _parse_date(d, where)
        if dates and (date - dates[-1]).days != 1:
            raise DataError(f"{where}: mobility dates must be consecutive ({dates[-1]} then {date})")
        dates.append(date)
        values.append(_parse_number(v, where))
    if not dates:
        raise DataError(f"{path}: no mobility rows")
    return dates[0], np.array(values)


def load_flows(path) -> dict[dt.date, dict[tuple, float]]:
    """``date,r1,r2,age,count`` rows grouped by date."""
    out: dict[dt.date, dict[tuple, float]] = {}
    for line, (d, r1, r2, age, c) in _read_rows(path, ("date", "r1", "r2", "age", "count")):
        where = f"{path}:{line}"
        date = _parse_date(d, where)
        key = (r1, r2, age)
        day = out.setdefault(date, {})
        if key in day:
            raise DataError(f"{where}: duplicate flow {key} on {date}")
        v = _parse_number(c, where)
        if v < 0:
            raise DataError(f"{where}: negative flow {c}")
        day[key] = v
    return out


def save_flows(flows: Mapping[dt.date, Mapping[tuple, float]], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "r1", "r2", "age", "count"])
        for date in sorted(flows):
            for (r1, r2, age), v in flows[date].items():
                w.writerow([date.isoformat(), r1, r2, age, fmt(v)])


def load_visits(path) -> dict[dt.date, dict[tuple[str, str], float]]:
    """``date,cohort,location,count`` rows grouped by date."""
    out: dict[dt.date, dict[tuple[str, str], float]] = {}
    for line, (d, cohort, loc, c) in _read_rows(path, ("date", "cohort", "location", "count")):
        where = f"{path}:{line}"
        date = _parse_date(d, where)
        v = _parse_number(c, where)
        if v < 0:
            raise DataError(f"{where}: negative visit count {c}")
        day = out.setdefault(date, {})
        if (cohort, loc) in day:
            raise DataError(f"{where}: duplicate visit row {(cohort, loc)} on {date}")
        day[(cohort, loc)] = v
    return out
