"""Planted-structure synthetic bike system.

Stations sit in spatial communities. Each station's hourly outflow is

    base * (1 + amp * sin(2pi (hour - phase_community) / 24))   daily cycle shared per community
    + dev[t]                                                   coupling term

with ``dev[t] = coupling * K @ dev[t-1] + N(0, noise_sigma^2)`` where ``K`` is a
row-normalised ``exp(-distance / coupling_length)`` kernel (self weight
included unless ``self_coupling`` is off). A station's next-hour deviation
thus depends on its neighbourhood's current deviations.

Each hour's outflow is split over destinations by a distance-decayed
preference, and every hire lasts ``ride_dwell_s`` plus a short jitter. With
the default one-hour hire, a station's inflow is mostly the previous hour's
outflow of its neighbours: signal that its own history cannot reveal but a
graph-aware model can.
"""

from __future__ import annotations

from dataclasses import dataclass
from io import StringIO
from pathlib import Path

import numpy as np
import pandas as pd

from .graphs import distance_matrix
from .ingest import (ContextSeries, FlowSeries, ParsedRecords, StationRegistry, bin_flows,
                     load_context_features)

M_PER_DEG_LAT = 111_320.0


@dataclass(frozen=True)
class SynthConfig:
    n_stations: int = 20
    n_communities: int = 5
    days: int = 180
    start: str = "2017-01-02"  # a Monday
    center_lat: float = 40.75
    center_lon: float = -73.98
    community_spacing_m: float = 3000.0
    community_radius_m: float = 250.0
    paired: bool = False
    pair_offset_m: float = 60.0
    base_min: float = 8.0
    base_max: float = 20.0
    amplitude: float = 0.5
    weekend_amplitude: float = 0.25
    coupling: float = 0.9
    coupling_length_m: float = 400.0
    self_coupling: bool = True
    noise_sigma: float = 2.0
    trip_length_m: float = 500.0
    round_trip_share: float = 0.02
    speed_mps: float = 4.0
    ride_dwell_s: float = 3600.0  # fixed hire period added to every ride
    ride_jitter_s: float = 120.0  # mean of the exponential jitter on top
    weather_gap_share: float = 0.02
    seed: int = 0


@dataclass(frozen=True)
class SyntheticCity:
    config: SynthConfig
    registry: StationRegistry
    records: ParsedRecords
    flows: FlowSeries
    context: ContextSeries
    weather: pd.DataFrame
    community: np.ndarray
    outflow_signal: np.ndarray  # (T, N) noiseless outflow mean given the past


def _layout(cfg: SynthConfig, rng: np.random.Generator):
    k = cfg.n_communities
    side = int(np.ceil(np.sqrt(k)))
    centers = np.array([[(c % side) * cfg.community_spacing_m, (c // side) * cfg.community_spacing_m]
                        for c in range(k)])
    centers -= centers.mean(axis=0)
    community = np.arange(cfg.n_stations) % k
    community.sort()
    # stations come in close pairs (e.g. two docks at one metro exit) scattered over the community
    pair = np.arange(cfg.n_stations) // 2 if cfg.paired else np.arange(cfg.n_stations)
    pair_center = rng.normal(0.0, cfg.community_radius_m, (pair.max() + 1, 2))
    angle = rng.uniform(0.0, 2 * np.pi, pair.max() + 1)
    side_sign = np.where(np.arange(cfg.n_stations) % 2 == 0, 0.5, -0.5)[:, None] * cfg.paired
    offset = side_sign * cfg.pair_offset_m * np.column_stack([np.cos(angle), np.sin(angle)])[pair]
    xy = centers[community] + pair_center[pair] + offset
    lat = cfg.center_lat + xy[:, 1] / M_PER_DEG_LAT
    lon = cfg.center_lon + xy[:, 0] / (M_PER_DEG_LAT * np.cos(np.radians(cfg.center_lat)))
    ids = tuple(f"S{i:03d}" for i in range(cfg.n_stations))
    return StationRegistry(ids, lat, lon), community


def allocate_trips(outflow: np.ndarray, pref: np.ndarray) -> np.ndarray:
    """Split integer outflows (T, N) over destinations by row-stochastic ``pref``.

    Largest-remainder rounding: every (hour, origin) row sums exactly to its outflow.
    """
    expected = outflow[:, :, None] * pref[None, :, :]
    base = np.floor(expected).astype(np.int64)
    deficit = outflow - base.sum(axis=2)
    frac = expected - base
    # rank destinations by fractional part, largest first; stable on ties
    order = np.argsort(-frac, axis=2, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(pref.shape[1])[None, None, :], axis=2)
    return base + (ranks < deficit[:, :, None])


def generate(cfg: SynthConfig = SynthConfig()) -> SyntheticCity:
    rng = np.random.default_rng(cfg.seed)
    registry, community = _layout(cfg, rng)
    n = cfg.n_stations
    T = cfg.days * 24
    dist = distance_matrix(registry)

    kernel = np.exp(-dist / cfg.coupling_length_m)
    if not cfg.self_coupling:
        np.fill_diagonal(kernel, 0.0)
    kernel /= kernel.sum(axis=1, keepdims=True)

    hours = pd.date_range(cfg.start, periods=T, freq="h")
    hod = np.asarray(hours.hour)
    weekend = np.asarray(hours.dayofweek >= 5)
    base = rng.uniform(cfg.base_min, cfg.base_max, n)
    phase = rng.uniform(0.0, 24.0, cfg.n_communities)[community]
    amp = np.where(weekend, cfg.weekend_amplitude, cfg.amplitude)[:, None]
    season = base * (1.0 + amp * np.sin(2 * np.pi * (hod[:, None] - phase[None, :]) / 24.0))

    noise = rng.normal(0.0, cfg.noise_sigma, (T, n))
    dev = np.zeros((T, n))
    signal = np.empty((T, n))
    signal[0] = season[0]
    dev[0] = noise[0]
    for t in range(1, T):
        drive = cfg.coupling * kernel @ dev[t - 1]
        signal[t] = season[t] + drive
        dev[t] = drive + noise[t]
    outflow = np.maximum(np.rint(season + dev), 0).astype(np.int64)

    # Destinations: each station's hourly outflow is split across destinations
    # in proportion to a distance-decayed preference (largest-remainder
    # rounding), so inflow is a planted linear coupling of neighbours' outflow.
    pref = np.exp(-dist / cfg.trip_length_m)
    np.fill_diagonal(pref, 0.0)
    pref = (1 - cfg.round_trip_share) * pref / pref.sum(axis=1, keepdims=True)
    pref[np.diag_indices(n)] = cfg.round_trip_share
    trips = allocate_trips(outflow, pref)  # (T, N_origin, N_dest)

    flat = trips.ravel()
    cells = np.arange(flat.size)
    trip_hour = np.repeat(cells // (n * n), flat)
    origin = np.repeat((cells // n) % n, flat)
    dest = np.repeat(cells % n, flat)
    t0 = hours[0].value // 10**9
    start = t0 + trip_hour * 3600 + rng.integers(0, 3600, len(origin))
    ride = dist[origin, dest] / cfg.speed_mps + cfg.ride_dwell_s + rng.exponential(cfg.ride_jitter_s, len(origin))
    end = start + np.rint(ride).astype(np.int64)
    inside = end < t0 + T * 3600
    origin, dest, start, end = origin[inside], dest[inside], start[inside], end[inside]

    ids = np.array(registry.ids, dtype=object)
    records = pd.DataFrame({
        "start_station_id": ids[origin],
        "start_time": pd.to_datetime(start, unit="s"),
        "end_station_id": ids[dest],
        "end_time": pd.to_datetime(end, unit="s"),
        "duration": end - start,
    })
    records = records.sort_values(["start_time", "start_station_id"], kind="stable").reset_index(drop=True)
    parsed = ParsedRecords(records, 0)
    flows = bin_flows(parsed, registry, start_hour=hours[0].to_datetime64(), n_hours=T)

    day = np.arange(T) / 24.0
    temperature = (5.0 + 10.0 * (day / cfg.days) + 5.0 * np.sin(2 * np.pi * (hod - 9) / 24.0)
                   + rng.normal(0.0, 1.0, T))
    wind = np.abs(rng.normal(4.0, 2.0, T))
    keep = rng.random(T) >= cfg.weather_gap_share
    keep[0] = True
    weather = pd.DataFrame({"timestamp": hours[keep].strftime("%Y-%m-%d %H:%M:%S"),
                            "temperature": np.round(temperature[keep], 2),
                            "wind_speed": np.round(wind[keep], 2)})
    buf = StringIO()
    weather.to_csv(buf, index=False)
    buf.seek(0)
    context = load_context_features(buf, flows.start_hour, T)
    return SyntheticCity(cfg, registry, parsed, flows, context, weather, community, signal)


def write_city(city: SyntheticCity, directory) -> dict:
    """Write ride records, station metadata and weather as CSVs in the public-data layout."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rec = city.records.records
    out = pd.DataFrame({
        "tripduration": rec["duration"],
        "starttime": rec["start_time"].dt.strftime("%Y-%m-%d %H:%M:%S"),
        "stoptime": rec["end_time"].dt.strftime("%Y-%m-%d %H:%M:%S"),
        "start station id": rec["start_station_id"],
        "end station id": rec["end_station_id"],
    })
    paths = {"records": d / "trips.csv", "stations": d / "stations.csv", "weather": d / "weather.csv"}
    out.to_csv(paths["records"], index=False)
    pd.DataFrame({"station_id": city.registry.ids, "latitude": city.registry.lat,
                  "longitude": city.registry.lon}).to_csv(paths["stations"], index=False, float_format="%.7f")
    city.weather.to_csv(paths["weather"], index=False)
    return {k: str(v) for k, v in paths.items()}
