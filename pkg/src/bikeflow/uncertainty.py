"""Prediction uncertainty: MC dropout spread, validation noise, and intervals.

The interval for a forecast ``y*`` is ``y* -/+ z * sqrt(s1^2 + s2^2)`` where
``s1`` is the spread of dropout-sampled forecasts (model uncertainty) and
``s2`` the spread of validation residuals (inherent noise).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import norm

from . import network as nw
from .errors import ConfigError, DataError
from .train import TrainedModel

log = logging.getLogger(__name__)

MIN_RESIDUALS = 30
FORECAST_COLUMNS = ("hour", "station_id", "inflow_pred", "inflow_lo", "inflow_hi", "outflow_pred",
                    "outflow_lo", "outflow_hi", "sigma_model", "sigma_noise")


def z_value(alpha: float) -> float:
    """Two-sided standard-normal quantile ``z_{alpha/2}``."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    return float(norm.ppf(1.0 - alpha / 2.0))


def dropout_passes(model: TrainedModel, values: np.ndarray, context: np.ndarray, targets, iterations: int,
                   seed: int, rate: float | None = None, batch: int = 512):
    """Yield ``iterations`` dropout-sampled forecasts, each (M, N, C) in flow units.

    Masks are variational in the encoder and standard in the head. Pass ``b``
    draws from the ``b``-th generator spawned from ``seed``, so the first k
    passes are the same whatever ``iterations`` is, and the masks do not
    depend on the batch size.
    """
    rate = model.dropout_rate if rate is None else rate
    x, ctx = model.windows(values, context, np.asarray(targets))
    M, N, C = len(x), model.shape.n_stations, model.shape.channels
    conv = np.concatenate([nw.convolve_windows(model.params, model.stacked, x[s:s + batch])[0]
                           for s in range(0, M, batch)]) if M else x
    for child in np.random.SeedSequence(seed).spawn(iterations):
        rng = np.random.default_rng(child)
        masks = nw.sample_variational_masks(rate, M * N, model.shape, rng, dtype=model.dtype)
        z = np.empty((M, N, C))
        for s in range(0, M, batch):
            e = min(s + batch, M)
            rows = slice(s * N, e * N)
            sub = nw.Masks(masks.enc_x[rows], masks.enc_h[rows], tuple(h[rows] for h in masks.head))
            z[s:e] = model.forward(x[s:e], ctx[s:e], sub, decoder=False, head=True, conv=conv[s:e]).head_out
        yield model.destandardize(z)


class RunningMoments:
    """Welford mean and variance, updated in a fixed order."""

    def __init__(self):
        self.count = 0
        self.mean = None
        self._m2 = None

    def add(self, y: np.ndarray) -> None:
        y = np.asarray(y, float)
        if self.mean is None:
            self.mean = np.zeros_like(y)
            self._m2 = np.zeros_like(y)
        self.count += 1
        delta = y - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (y - self.mean)

    def std(self) -> np.ndarray:
        if self.count < 2:
            raise DataError("sample standard deviation needs at least 2 draws")
        return np.sqrt(self._m2 / (self.count - 1))


def mc_dropout_predict(model: TrainedModel, values: np.ndarray, context: np.ndarray, targets,
                       iterations: int, seed: int, rate: float | None = None,
                       batch: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Mean and sample std (ddof=1) of ``iterations`` dropout-sampled forecasts.

    Outputs are (M, N, C) in flow units; the mean is not clamped.
    """
    if iterations < 2:
        raise ConfigError(f"MC dropout needs at least 2 iterations, got {iterations}")
    acc = RunningMoments()
    for y in dropout_passes(model, values, context, targets, iterations, seed, rate, batch):
        acc.add(y)
    return acc.mean, acc.std()


def residual_std(residuals: np.ndarray, min_count: int = MIN_RESIDUALS) -> np.ndarray:
    """Per-station population std of (M, N, C) residuals, ignoring NaNs.

    Stations with fewer than ``min_count`` residuals in a channel take the
    pooled std of that channel instead.
    """
    r = np.asarray(residuals, float)
    if r.ndim != 3 or r.shape[0] == 0:
        raise DataError("residuals must be a non-empty (hours, stations, channels) array")
    finite = np.isfinite(r)
    counts = finite.sum(axis=0)
    if not finite.any():
        raise DataError("no finite validation residuals")
    with np.errstate(invalid="ignore", divide="ignore"):
        per_station = np.sqrt(np.nanmean((r - np.nanmean(r, axis=0)) ** 2, axis=0))
    pooled = np.array([np.nanstd(r[..., c]) for c in range(r.shape[2])])
    sparse = counts < min_count
    if sparse.any():
        log.info("%d station-channels have < %d residuals; using pooled noise", int(sparse.sum()), min_count)
    return np.where(sparse, pooled[None, :], per_station)


def inherent_noise(model: TrainedModel, values: np.ndarray, context: np.ndarray, targets,
                   min_count: int = MIN_RESIDUALS) -> np.ndarray:
    """σ₂ per (station, channel) from deterministic forecasts over validation targets."""
    targets = np.asarray(targets)
    if len(targets) == 0:
        raise DataError("validation set is empty")
    pred = model.predict(values, context, targets)
    return residual_std(pred - np.asarray(values, float)[targets], min_count)


def confidence_interval(point, sigma_model, sigma_noise, alpha: float = 0.05,
                        floor: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """``point -/+ z_{alpha/2} sqrt(s1^2 + s2^2)``; ``floor`` clips the lower bound at 0."""
    s1 = np.asarray(sigma_model, float)
    s2 = np.asarray(sigma_noise, float)
    if np.any(s1 < 0) or np.any(s2 < 0):
        raise DataError("standard deviations must be non-negative")
    half = z_value(alpha) * np.sqrt(s1 ** 2 + s2 ** 2)
    point = np.asarray(point, float)
    lo, hi = point - half, point + half
    return (np.maximum(lo, 0.0) if floor else lo), hi


def coverage(lo, hi, actual) -> float:
    """Fraction of actuals inside their closed interval, pooled over everything given."""
    lo, hi, actual = (np.asarray(a, float) for a in (lo, hi, actual))
    if not (lo.shape == hi.shape == actual.shape):
        raise DataError(f"interval and actual counts differ: {lo.shape}, {hi.shape}, {actual.shape}")
    if actual.size == 0:
        raise DataError("coverage of an empty set")
    return float(np.mean((lo <= actual) & (actual <= hi)))


@dataclass(frozen=True)
class UncertaintyEstimate:
    point: np.ndarray        # (M, N, C), clamped at 0
    sigma_model: np.ndarray  # (M, N, C)
    sigma_noise: np.ndarray  # (N, C)
    alpha: float = 0.05

    def interval(self, floor: bool = True) -> tuple[np.ndarray, np.ndarray]:
        return confidence_interval(self.point, self.sigma_model, self.sigma_noise, self.alpha, floor)

    @property
    def lo(self) -> np.ndarray:
        return self.interval()[0]

    @property
    def hi(self) -> np.ndarray:
        return self.interval()[1]


def estimate(model: TrainedModel, values: np.ndarray, context: np.ndarray, targets, validation_targets,
             iterations: int = 300, seed: int = 0, alpha: float = 0.05) -> UncertaintyEstimate:
    """MC-dropout point and σ₁ on ``targets`` plus validation σ₂."""
    mean, s1 = mc_dropout_predict(model, values, context, targets, iterations, seed)
    s2 = inherent_noise(model, values, context, validation_targets)
    return UncertaintyEstimate(np.maximum(mean, 0.0), s1, s2, alpha)


def forecast_frame(hours, station_ids, point: np.ndarray, interval=None, sigma_model=None,
                   sigma_noise=None) -> pd.DataFrame:
    """Long-format forecast table, one row per (hour, station).

    The sigma columns carry the inflow-channel values. Without an interval
    the bound and sigma columns are left empty.
    """
    hours = np.asarray(hours, dtype="datetime64[h]")
    M, N, _ = point.shape
    frame = {
        "hour": np.repeat(pd.DatetimeIndex(hours).strftime("%Y-%m-%d %H:%M"), N),
        "station_id": np.tile(np.asarray(station_ids, dtype=object), M),
        "inflow_pred": point[..., 0].ravel(),
        "outflow_pred": point[..., 1].ravel(),
    }
    empty = np.full(M * N, np.nan)
    lo, hi = interval if interval is not None else (None, None)
    for ch, name in enumerate(("inflow", "outflow")):
        frame[f"{name}_lo"] = lo[..., ch].ravel() if lo is not None else empty
        frame[f"{name}_hi"] = hi[..., ch].ravel() if hi is not None else empty
    frame["sigma_model"] = sigma_model[..., 0].ravel() if sigma_model is not None else empty
    frame["sigma_noise"] = (np.broadcast_to(sigma_noise[..., 0], (M, N)).ravel()
                            if sigma_noise is not None else empty)
    return pd.DataFrame(frame)[list(FORECAST_COLUMNS)]


def write_forecast_csv(path, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.6f", na_rep="")
    return path
