"""Ride-record ingestion: CSV parsing, station registry, hourly flow binning,
chronological splits and hourly context features."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence, Union

import numpy as np
import pandas as pd

from .errors import DataError, SchemaError

log = logging.getLogger(__name__)

Source = Union[str, Path, IO]

HOUR = np.timedelta64(1, "h")
RECORD_COLUMNS = ["start_station_id", "start_time", "end_station_id", "end_time"]


@dataclass(frozen=True)
class RecordSchema:
    """Column-name aliases for one family of ride-record CSVs.

    Header matching is case-insensitive and ignores surrounding whitespace.
    The first alias present in the header wins.
    """

    start_station_id: tuple[str, ...]
    start_time: tuple[str, ...]
    end_station_id: tuple[str, ...]
    end_time: tuple[str, ...]
    duration: tuple[str, ...] = ()
    start_lat: tuple[str, ...] = ()
    start_lon: tuple[str, ...] = ()
    end_lat: tuple[str, ...] = ()
    end_lon: tuple[str, ...] = ()
    time_format: str | None = None

    REQUIRED = ("start_station_id", "start_time", "end_station_id", "end_time")
    OPTIONAL = ("duration", "start_lat", "start_lon", "end_lat", "end_lon")

    def resolve(self, header: Sequence[str]) -> dict[str, str]:
        """Map canonical field names to the actual header columns."""
        lookup = {str(h).strip().lower(): h for h in header}
        resolved = {}
        for name in self.REQUIRED + self.OPTIONAL:
            for alias in getattr(self, name):
                if alias.lower() in lookup:
                    resolved[name] = lookup[alias.lower()]
                    break
        missing = [name for name in self.REQUIRED if name not in resolved]
        if missing:
            raise SchemaError(
                f"ride-record header lacks required column(s) {missing}; header was {list(header)}"
            )
        return resolved

    @classmethod
    def from_dict(cls, d: dict) -> "RecordSchema":
        kwargs = {}
        for k, v in d.items():
            kwargs[k] = v if k == "time_format" else tuple([v] if isinstance(v, str) else v)
        return cls(**kwargs)


# Citi Bike: 2013-2020 headers, then the 2021+ "started_at" layout.
NYC_SCHEMA = RecordSchema(
    start_station_id=("start station id", "start_station_id"),
    start_time=("starttime", "start time", "started_at", "start_time"),
    end_station_id=("end station id", "end_station_id"),
    end_time=("stoptime", "stop time", "ended_at", "end_time"),
    duration=("tripduration", "trip duration"),
    start_lat=("start station latitude", "start_lat"),
    start_lon=("start station longitude", "start_lng"),
    end_lat=("end station latitude", "end_lat"),
    end_lon=("end station longitude", "end_lng"),
)

# Divvy: 2013-2019 headers, then the 2020+ layout shared with Citi Bike.
CHICAGO_SCHEMA = RecordSchema(
    start_station_id=("from_station_id", "01 - rental details local start station id", "start_station_id"),
    start_time=("start_time", "starttime", "01 - rental details local start time", "started_at"),
    end_station_id=("to_station_id", "02 - rental details local end station id", "end_station_id"),
    end_time=("end_time", "stoptime", "01 - rental details local end time", "ended_at"),
    duration=("tripduration", "01 - rental details duration in seconds uncapped"),
    start_lat=("start_lat",),
    start_lon=("start_lng",),
    end_lat=("end_lat",),
    end_lon=("end_lng",),
)


def _merge(*schemas: RecordSchema) -> RecordSchema:
    fields_ = {}
    for name in RecordSchema.REQUIRED + RecordSchema.OPTIONAL:
        seen: list[str] = []
        for s in schemas:
            seen += [a for a in getattr(s, name) if a not in seen]
        fields_[name] = tuple(seen)
    return RecordSchema(**fields_)


DEFAULT_SCHEMA = _merge(NYC_SCHEMA, CHICAGO_SCHEMA)
SCHEMAS = {"nyc": NYC_SCHEMA, "chicago": CHICAGO_SCHEMA, "default": DEFAULT_SCHEMA}


@dataclass(frozen=True)
class ParsedRecords:
    """Cleanly parsed ride records plus the number of rejected rows.

    ``records`` has the columns ``start_station_id, start_time, end_station_id,
    end_time`` and, when the source provides them, ``duration`` and the four
    coordinate columns.
    """

    records: pd.DataFrame
    skipped: int

    def __len__(self) -> int:
        return len(self.records)


def _read_csv(source: Source, what: str) -> pd.DataFrame:
    try:
        return pd.read_csv(source, dtype=str, skipinitialspace=True, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DataError(f"{what} is empty") from None


def _parse_times(col: pd.Series, fmt: str | None) -> pd.Series:
    col = col.str.strip()
    if fmt is None:
        # Mixed-format files are rare; per-element inference is too slow for the common case.
        out = pd.to_datetime(col, errors="coerce")
        if out.isna().mean() > 0.5:
            out = pd.to_datetime(col, errors="coerce", format="mixed")
    else:
        out = pd.to_datetime(col, errors="coerce", format=fmt)
    if getattr(out.dt, "tz", None) is not None:
        out = out.dt.tz_localize(None)
    return out


def parse_ride_records(source: Source, schema: RecordSchema = DEFAULT_SCHEMA) -> ParsedRecords:
    """Parse one ride-record CSV.

    Rows with an unparsable timestamp, an empty station key or an end time
    earlier than the start time are skipped and counted.
    """
    raw = _read_csv(source, "ride-record file")
    if raw.empty and len(raw.columns) == 0:
        raise DataError("ride-record file is empty")
    cols = schema.resolve(raw.columns)

    out = pd.DataFrame(
        {
            "start_station_id": raw[cols["start_station_id"]].str.strip(),
            "start_time": _parse_times(raw[cols["start_time"]], schema.time_format),
            "end_station_id": raw[cols["end_station_id"]].str.strip(),
            "end_time": _parse_times(raw[cols["end_time"]], schema.time_format),
        }
    )
    if "duration" in cols:
        out["duration"] = pd.to_numeric(raw[cols["duration"]].str.replace(",", ""), errors="coerce")
    for name in ("start_lat", "start_lon", "end_lat", "end_lon"):
        if name in cols:
            out[name] = pd.to_numeric(raw[cols[name]], errors="coerce")

    ok = (
        out["start_time"].notna()
        & out["end_time"].notna()
        & (out["start_station_id"] != "")
        & (out["end_station_id"] != "")
        & (out["start_station_id"].str.upper() != "NULL")
        & (out["end_station_id"].str.upper() != "NULL")
    )
    ok &= out["end_time"] >= out["start_time"]
    skipped = int((~ok).sum())
    if skipped:
        log.warning("skipped %d of %d ride records", skipped, len(out))
    return ParsedRecords(out[ok].reset_index(drop=True), skipped)


def concat_records(parts: Iterable[ParsedRecords]) -> ParsedRecords:
    parts = list(parts)
    frames = [p.records for p in parts]
    return ParsedRecords(
        pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=RECORD_COLUMNS),
        sum(p.skipped for p in parts),
    )


@dataclass(frozen=True)
class StationRegistry:
    """Stations in dense-index order (lexicographic by id)."""

    ids: tuple[str, ...]
    lat: np.ndarray
    lon: np.ndarray
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise DataError("station ids are not unique")
        lat = np.asarray(self.lat, dtype=float)
        lon = np.asarray(self.lon, dtype=float)
        if lat.shape != (len(self.ids),) or lon.shape != (len(self.ids),):
            raise DataError("coordinate arrays do not match the station count")
        if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180):
            raise DataError("station coordinates out of range")
        lat.setflags(write=False)
        lon.setflags(write=False)
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.ids)})

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def entries(self) -> list[tuple[str, float, float, int]]:
        return [(s, float(a), float(o), i) for i, (s, a, o) in enumerate(zip(self.ids, self.lat, self.lon))]

    @property
    def coords(self) -> np.ndarray:
        return np.column_stack([self.lat, self.lon])

    def index_of(self, station_ids) -> np.ndarray:
        idx = pd.Index(self.ids).get_indexer(pd.Index(np.asarray(station_ids, dtype=object)))
        if np.any(idx < 0):
            unknown = sorted(set(np.asarray(station_ids, dtype=object)[idx < 0]))[:10]
            raise DataError(f"station ids not in registry: {unknown}")
        return idx

    def to_csv(self, path: Union[str, Path]) -> None:
        pd.DataFrame(
            {"station_id": self.ids, "latitude": self.lat, "longitude": self.lon, "dense_index": range(len(self))}
        ).to_csv(path, index=False, float_format="%.8f")

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "StationRegistry":
        df = pd.read_csv(path, dtype={"station_id": str}).sort_values("dense_index")
        return cls(tuple(df["station_id"]), df["latitude"].to_numpy(), df["longitude"].to_numpy())


_META_ALIASES = {
    "id": ("station_id", "id", "station id", "short_name"),
    "lat": ("latitude", "lat", "station latitude"),
    "lon": ("longitude", "lon", "lng", "station longitude"),
}


def _read_station_metadata(source: Source) -> pd.DataFrame:
    raw = _read_csv(source, "station-metadata file")
    lookup = {c.strip().lower(): c for c in raw.columns}
    cols = {}
    for key, aliases in _META_ALIASES.items():
        hit = next((lookup[a] for a in aliases if a in lookup), None)
        if hit is None:
            raise SchemaError(f"station-metadata header lacks a {key!r} column; header was {list(raw.columns)}")
        cols[key] = hit
    return pd.DataFrame(
        {
            "id": raw[cols["id"]].str.strip(),
            "lat": pd.to_numeric(raw[cols["lat"]], errors="coerce"),
            "lon": pd.to_numeric(raw[cols["lon"]], errors="coerce"),
        }
    )


def build_station_registry(records: ParsedRecords | pd.DataFrame, metadata: Source | None = None) -> StationRegistry:
    """One entry per station seen as a trip start or end.

    Coordinates come from ``metadata`` when given, otherwise from the
    coordinate columns of the ride records. When an id has several distinct
    coordinates the first occurrence is kept.
    """
    df = records.records if isinstance(records, ParsedRecords) else records
    if len(df) == 0:
        raise DataError("cannot build a station registry from zero records")
    ids = sorted(set(df["start_station_id"]).union(df["end_station_id"]))

    if metadata is not None:
        coords = _read_station_metadata(metadata)
    else:
        parts = []
        for side in ("start", "end"):
            if f"{side}_lat" in df and f"{side}_lon" in df:
                parts.append(
                    pd.DataFrame(
                        {"id": df[f"{side}_station_id"], "lat": df[f"{side}_lat"], "lon": df[f"{side}_lon"]}
                    )
                )
        coords = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=["id", "lat", "lon"])
    coords = coords.dropna()

    distinct = coords.drop_duplicates()
    conflicted = distinct["id"][distinct["id"].duplicated()].unique()
    if len(conflicted):
        log.warning("conflicting coordinates for %d station(s), keeping first seen: %s",
                    len(conflicted), sorted(conflicted)[:10])
    first = coords.drop_duplicates("id").set_index("id")

    missing = [s for s in ids if s not in first.index]
    if missing:
        raise DataError(f"no coordinates for station(s): {missing}")
    first = first.loc[ids]
    return StationRegistry(tuple(ids), first["lat"].to_numpy(float), first["lon"].to_numpy(float))


@dataclass(frozen=True)
class FlowSeries:
    """Hourly station flows. ``values[t, n, 0]`` is inflow, ``[..., 1]`` outflow."""

    start_hour: np.datetime64
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[2] != 2:
            raise DataError(f"flow values must have shape (T, N, 2), got {v.shape}")
        if np.any(v < 0):
            raise DataError("flow values must be non-negative")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "start_hour", np.datetime64(self.start_hour, "h"))

    @property
    def n_hours(self) -> int:
        return self.values.shape[0]

    @property
    def n_stations(self) -> int:
        return self.values.shape[1]

    @property
    def hours(self) -> pd.DatetimeIndex:
        return pd.date_range(pd.Timestamp(self.start_hour), periods=self.n_hours, freq="h")

    @property
    def inflow(self) -> np.ndarray:
        return self.values[:, :, 0]

    @property
    def outflow(self) -> np.ndarray:
        return self.values[:, :, 1]

    def restrict(self, hours: range) -> "FlowSeries":
        return FlowSeries(self.start_hour + hours.start * HOUR, self.values[hours.start:hours.stop])

    def hour_index(self, when) -> int:
        return int((np.datetime64(pd.Timestamp(when).floor("h"), "h") - self.start_hour) // HOUR)


def bin_flows(
    records: ParsedRecords | pd.DataFrame,
    registry: StationRegistry,
    start_hour=None,
    n_hours: int | None = None,
) -> FlowSeries:
    """Count outflow at each trip's start hour and inflow at its end hour.

    The time axis spans every hour touched by a record unless ``start_hour``
    and ``n_hours`` pin it (used to align shards before merging).
    """
    df = records.records if isinstance(records, ParsedRecords) else records
    n = len(registry)
    start = df["start_time"].to_numpy("datetime64[h]")
    end = df["end_time"].to_numpy("datetime64[h]")
    if start_hour is None:
        if len(df) == 0:
            raise DataError("no records to bin")
        start_hour = min(start.min(), end.min())
        n_hours = int((max(start.max(), end.max()) - start_hour) // HOUR) + 1
    start_hour = np.datetime64(start_hour, "h")
    t_out = ((start - start_hour) // HOUR).astype(np.int64)
    t_in = ((end - start_hour) // HOUR).astype(np.int64)
    if len(df) and (min(t_out.min(), t_in.min()) < 0 or max(t_out.max(), t_in.max()) >= n_hours):
        raise DataError("records fall outside the requested time axis")
    s_out = registry.index_of(df["start_station_id"].to_numpy())
    s_in = registry.index_of(df["end_station_id"].to_numpy())
    size = n_hours * n * 2
    counts = np.bincount((t_in * n + s_in) * 2, minlength=size) + np.bincount((t_out * n + s_out) * 2 + 1, minlength=size)
    return FlowSeries(start_hour, counts.reshape(n_hours, n, 2).astype(np.int64))


def merge_flow_series(parts: Sequence[FlowSeries]) -> FlowSeries:
    """Add partial flow tensors that share a registry; the union time axis is used."""
    if not parts:
        raise DataError("nothing to merge")
    start = min(p.start_hour for p in parts)
    stop = max(p.start_hour + p.n_hours * HOUR for p in parts)
    total = np.zeros((int((stop - start) // HOUR), parts[0].n_stations, 2), dtype=np.int64)
    for p in parts:
        off = int((p.start_hour - start) // HOUR)
        total[off:off + p.n_hours] += p.values.astype(np.int64)
    return FlowSeries(start, total)


@dataclass(frozen=True)
class DatasetSplit:
    train: range
    validation: range
    test: range

    def as_dict(self) -> dict:
        return {k: [r.start, r.stop] for k, r in (("train", self.train), ("validation", self.validation), ("test", self.test))}


def split_dataset(series: FlowSeries | int, test_days: int = 80, validation_days: int = 40) -> DatasetSplit:
    """Test is the last ``test_days``, validation the ``validation_days`` before it, train the rest."""
    total = series if isinstance(series, int) else series.n_hours
    n_test, n_val = test_days * 24, validation_days * 24
    if total <= n_test + n_val:
        raise DataError(
            f"series has {total} hours; at least {n_test + n_val + 1} are needed "
            f"for {test_days} test days and {validation_days} validation days"
        )
    a, b = total - n_test - n_val, total - n_test
    return DatasetSplit(range(0, a), range(a, b), range(b, total))


@dataclass(frozen=True)
class ContextSeries:
    """Hourly context vectors aligned with a flow series time axis."""

    columns: tuple[str, ...]
    values: np.ndarray

    @property
    def width(self) -> int:
        return self.values.shape[1]


def weekend_flags(start_hour, n_hours: int) -> np.ndarray:
    hours = pd.date_range(pd.Timestamp(np.datetime64(start_hour, "h")), periods=n_hours, freq="h")
    return (hours.dayofweek >= 5).astype(float)


_WEATHER_ALIASES = {
    "timestamp": ("timestamp", "time", "datetime", "date"),
    "temperature": ("temperature", "temp", "tmp"),
    "wind_speed": ("wind_speed", "wind", "windspeed", "wnd", "awnd"),
}


def load_context_features(weather: Source | None, start_hour, n_hours: int) -> ContextSeries:
    """Build (temperature, wind_speed, is_weekend) per hour.

    Weather readings are averaged within each hour and forward-filled across
    gaps; hours before the first reading take the first reading. Without a
    weather source only the weekend flag is produced.
    """
    weekend = weekend_flags(start_hour, n_hours)
    if weather is None:
        log.warning("no weather data; context is the weekend flag only")
        return ContextSeries(("is_weekend",), weekend[:, None])

    raw = _read_csv(weather, "weather file")
    lookup = {c.strip().lower(): c for c in raw.columns}
    cols = {}
    for key, aliases in _WEATHER_ALIASES.items():
        hit = next((lookup[a] for a in aliases if a in lookup), None)
        if hit is None:
            raise SchemaError(f"weather header lacks a {key!r} column; header was {list(raw.columns)}")
        cols[key] = hit
    ts = _parse_times(raw[cols["timestamp"]], None).dt.floor("h")
    frame = pd.DataFrame(
        {
            "temperature": pd.to_numeric(raw[cols["temperature"]], errors="coerce").to_numpy(),
            "wind_speed": pd.to_numeric(raw[cols["wind_speed"]], errors="coerce").to_numpy(),
        },
        index=pd.DatetimeIndex(ts),
    )
    frame = frame[frame.index.notna()]
    hourly = frame.groupby(level=0).mean()
    axis = pd.date_range(pd.Timestamp(np.datetime64(start_hour, "h")), periods=n_hours, freq="h")
    if hourly.empty or hourly.index.max() < axis[0] or hourly.index.min() > axis[-1]:
        raise DataError("weather observations do not overlap the flow time range")
    aligned = hourly.reindex(hourly.index.union(axis)).ffill().reindex(axis).bfill()
    values = np.column_stack([aligned["temperature"].to_numpy(), aligned["wind_speed"].to_numpy(), weekend])
    return ContextSeries(("temperature", "wind_speed", "is_weekend"), values)
