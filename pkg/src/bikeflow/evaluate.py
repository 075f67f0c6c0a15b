"""Metrics, station rankings, the seasonal historical-mean baseline and ablations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import network as nw
from .errors import ConfigError, DataError
from .graphs import StationGraph
from .ingest import ContextSeries, DatasetSplit, FlowSeries
from .train import TrainConfig, TrainedModel, TrainLog, train, window_targets

VARIANTS = {
    "multi": ("distance", "interaction", "correlation"),
    "distance": ("distance",),
    "interaction": ("interaction",),
    "correlation": ("correlation",),
    "none": (),
}


def rmse(predictions, actuals) -> float:
    p = np.asarray(predictions, float)
    a = np.asarray(actuals, float)
    if p.shape != a.shape:
        raise DataError(f"prediction shape {p.shape} differs from actual shape {a.shape}")
    if p.size == 0:
        raise DataError("RMSE of an empty set")
    return float(np.sqrt(np.mean((p - a) ** 2)))


def top_k_stations(train_values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k stations with the largest total flow, busiest first.

    ``train_values`` is the (T, N, C) flow tensor of the training range only.
    Ties go to the lower index.
    """
    totals = np.asarray(train_values, float).sum(axis=(0, 2))
    if not 0 < k <= len(totals):
        raise ConfigError(f"k must lie in [1, {len(totals)}], got {k}")
    return np.lexsort((np.arange(len(totals)), -totals))[:k]


def historical_mean_baseline(train_values: np.ndarray, train_hours, target_hours) -> np.ndarray:
    """Per-station mean over training hours sharing the target's weekday and hour of day.

    An empty (weekday, hour) slot falls back to the hour-of-day mean, then to
    the overall mean. Returns (M, N, C).
    """
    v = np.asarray(train_values, float)
    if len(v) == 0:
        raise DataError("historical mean needs training data")
    th = np.asarray(train_hours, dtype="datetime64[h]")
    qh = np.asarray(target_hours, dtype="datetime64[h]")

    def slots(h):
        hours = h.astype(np.int64)
        # 1970-01-01 was a Thursday; shift so Monday is 0
        return (hours // 24 + 3) % 7, hours % 24

    tdow, thod = slots(th)
    qdow, qhod = slots(qh)
    out = np.empty((len(qh),) + v.shape[1:])
    overall = v.mean(axis=0)
    cache = {}
    for i, (d, h) in enumerate(zip(qdow, qhod)):
        key = (int(d), int(h))
        if key not in cache:
            sel = (tdow == d) & (thod == h)
            if not sel.any():
                sel = thod == h
            cache[key] = v[sel].mean(axis=0) if sel.any() else overall
        out[i] = cache[key]
    return out


@dataclass
class EvaluationReport:
    variant: str
    overall_rmse: float
    inflow_rmse: float
    outflow_rmse: float
    station_mean_rmse: float
    per_station_rmse: list
    top_k_rmse: dict
    coverage: float | None = None
    baselines: dict = field(default_factory=dict)
    fingerprint: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        rows = [("model", self.variant, self.overall_rmse, self.inflow_rmse)]
        rows += [("baseline", name, b["overall_rmse"], b["inflow_rmse"]) for name, b in sorted(self.baselines.items())]
        lines = [f"{'kind':<9}{'name':<17}{'rmse':>9}{'inflow':>9}"]
        lines += [f"{k:<9}{n:<17}{o:>9.4f}{i:>9.4f}" for k, n, o, i in rows]
        lines.append(f"mean per-station rmse {self.station_mean_rmse:.4f}")
        for k, v in sorted(self.top_k_rmse.items(), key=lambda kv: int(kv[0])):
            lines.append(f"top-{k} rmse {v:.4f}")
        if self.coverage is not None:
            lines.append(f"interval coverage {self.coverage:.4f}")
        return "\n".join(lines) + "\n"


def build_report(variant: str, prediction: np.ndarray, actual: np.ndarray, train_values: np.ndarray,
                 baselines: Mapping[str, np.ndarray] | None = None, coverage: float | None = None,
                 top_ks: Sequence[int] = (5, 10), fingerprint: str = "") -> EvaluationReport:
    """Score (M, N, C) forecasts. RMSE pools all station-hours and channels."""
    per_station = [rmse(prediction[:, n], actual[:, n]) for n in range(actual.shape[1])]
    top = {}
    for k in top_ks:
        k = min(k, actual.shape[1])
        idx = top_k_stations(train_values, k)
        top[str(k)] = rmse(prediction[:, idx], actual[:, idx])
    base = {name: {"overall_rmse": rmse(p, actual), "inflow_rmse": rmse(p[..., 0], actual[..., 0])}
            for name, p in (baselines or {}).items()}
    return EvaluationReport(variant, rmse(prediction, actual), rmse(prediction[..., 0], actual[..., 0]),
                            rmse(prediction[..., 1], actual[..., 1]), float(np.mean(per_station)),
                            per_station, top, coverage, base, fingerprint)


def evaluate_model(model: TrainedModel, flows: FlowSeries, context: ContextSeries, split: DatasetSplit,
                   variant: str = "multi", coverage: float | None = None,
                   top_ks: Sequence[int] = (5, 10)) -> EvaluationReport:
    """Deterministic test-range forecasts scored against actuals and the historical mean."""
    targets = window_targets(split.test, model.shape.history)
    if len(targets) == 0:
        raise DataError("test range is shorter than the history length")
    values = flows.values
    pred = model.predict(values, context.values, targets)
    actual = values[targets].astype(float)
    train_values = values[split.train.start:split.train.stop]
    hours = flows.hours
    hist = historical_mean_baseline(train_values, hours[split.train.start:split.train.stop], hours[targets])
    return build_report(variant, pred, actual, train_values, {"historical_mean": hist}, coverage, top_ks,
                        model.fingerprint)


def ablation_run(variant: str, config: TrainConfig, split: DatasetSplit, graphs: Mapping[str, StationGraph],
                 flows: FlowSeries, context: ContextSeries, hidden: int = 64, history: int = 6,
                 decoder_steps: int = 3, fingerprint: str = "") -> tuple[EvaluationReport, TrainedModel, TrainLog]:
    """Train and evaluate one graph-set variant. Splits and seeds are shared across variants."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from {sorted(VARIANTS)}")
    missing = [k for k in VARIANTS[variant] if k not in graphs]
    if missing:
        raise ConfigError(f"variant {variant} needs graphs {missing}")
    chosen = [graphs[k] for k in VARIANTS[variant]]
    shape = nw.NetworkShape(n_stations=flows.n_stations, n_graphs=len(chosen), channels=flows.values.shape[2],
                            hidden=hidden, history=history, decoder_steps=decoder_steps,
                            context_width=context.width)
    model, trainlog = train(config, split, chosen, flows, context, shape, fingerprint)
    return evaluate_model(model, flows, context, split, variant), model, trainlog
