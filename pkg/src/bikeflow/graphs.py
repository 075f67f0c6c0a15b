"""Inter-station graphs: inverse distance, trip interaction and flow correlation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .errors import DataError
from .ingest import FlowSeries, ParsedRecords, StationRegistry

EARTH_RADIUS_M = 6_371_000.0
DISTANCE_FLOOR_M = 10.0

KINDS = ("distance", "interaction", "correlation")


@dataclass(frozen=True)
class StationGraph:
    kind: str
    adjacency: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        a = np.array(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DataError(f"adjacency must be square, got {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise DataError(f"{self.kind} adjacency must be finite and non-negative")
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]


def haversine_distance(coord_a, coord_b) -> np.ndarray:
    """Great-circle distance in metres between (lat, lon) pairs given in degrees.

    Broadcasts over leading dimensions.
    """
    a = np.radians(np.asarray(coord_a, dtype=float))
    b = np.radians(np.asarray(coord_b, dtype=float))
    dlat = b[..., 0] - a[..., 0]
    dlon = b[..., 1] - a[..., 1]
    h = np.sin(dlat / 2) ** 2 + np.cos(a[..., 0]) * np.cos(b[..., 0]) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def distance_matrix(registry: StationRegistry) -> np.ndarray:
    c = registry.coords
    return haversine_distance(c[:, None, :], c[None, :, :])


def build_distance_graph(registry: StationRegistry, floor_m: float = DISTANCE_FLOOR_M) -> StationGraph:
    if len(registry) < 2:
        raise DataError("a distance graph needs at least 2 stations")
    adj = 1.0 / np.maximum(distance_matrix(registry), floor_m)
    np.fill_diagonal(adj, 0.0)
    return StationGraph("distance", adj)


def build_interaction_graph(records: ParsedRecords | pd.DataFrame, registry: StationRegistry) -> StationGraph:
    """Undirected trip counts between station pairs; round trips land on the diagonal.

    Callers restrict ``records`` to the training period.
    """
    df = records.records if isinstance(records, ParsedRecords) else records
    n = len(registry)
    src = registry.index_of(df["start_station_id"].to_numpy())
    dst = registry.index_of(df["end_station_id"].to_numpy())
    directed = np.bincount(src * n + dst, minlength=n * n).reshape(n, n).astype(np.float64)
    adj = directed + directed.T
    adj[np.diag_indices(n)] = np.diag(directed)
    return StationGraph("interaction", adj)


def pearson(x, y) -> float:
    """Pearson correlation; 0 when either series is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"series must be 1-d and of equal length, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ValueError("pearson needs at least 2 observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.dot(dx, dx))
    sy = np.sqrt(np.dot(dy, dy))
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0))


def correlation_matrix(series: np.ndarray) -> np.ndarray:
    """Pairwise Pearson correlation of the columns of a (T, N) array.

    Constant columns correlate 0 with everything, including themselves.
    """
    s = np.asarray(series, dtype=float)
    d = s - s.mean(axis=0)
    norm = np.sqrt(np.einsum("tn,tn->n", d, d))
    live = norm > 0
    r = np.zeros((s.shape[1], s.shape[1]))
    u = d[:, live] / norm[live]
    r[np.ix_(live, live)] = np.clip(u.T @ u, -1.0, 1.0)
    return r


def build_correlation_graph(flows: FlowSeries, usage: str = "total") -> StationGraph:
    """Clamped Pearson correlation of hourly station usage.

    ``usage`` selects the series: ``total`` (inflow + outflow), ``inflow``
    or ``outflow``. Callers restrict ``flows`` to the training period.
    """
    if flows.n_hours < 2:
        raise DataError("correlation graph needs at least 2 hours of flow")
    v = flows.values.astype(np.float64)
    series = {"total": v.sum(axis=2), "inflow": v[:, :, 0], "outflow": v[:, :, 1]}.get(usage)
    if series is None:
        raise ValueError(f"unknown usage {usage!r}")
    adj = np.maximum(correlation_matrix(series), 0.0)
    np.fill_diagonal(adj, 0.0)
    return StationGraph("correlation", adj)


def normalize_adjacency(graph: StationGraph) -> StationGraph:
    """Row-normalise (zero rows stay zero) and add the identity."""
    if graph.normalized:
        raise DataError(f"{graph.kind} graph is already normalized")
    a = graph.adjacency
    deg = a.sum(axis=1)
    # divide rows directly: 1/deg overflows for subnormal degrees
    out = np.divide(a, deg[:, None], out=np.zeros_like(a), where=deg[:, None] > 0) + np.eye(graph.n)
    return replace(graph, adjacency=out, normalized=True)


def graph_summary(graph: StationGraph) -> dict:
    a = graph.adjacency
    off = a[~np.eye(graph.n, dtype=bool)]
    deg = a.sum(axis=1)
    return {
        "kind": graph.kind,
        "n": graph.n,
        "normalized": graph.normalized,
        "density": float(np.count_nonzero(off) / max(off.size, 1)),
        "degree_min": float(deg.min()),
        "degree_mean": float(deg.mean()),
        "degree_max": float(deg.max()),
    }
