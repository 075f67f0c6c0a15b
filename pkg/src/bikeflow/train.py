"""Two-phase training: encoder-decoder pretraining, then the FC head on frozen embeddings."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import network as nw
from .errors import DataError, DivergenceError
from .graphs import StationGraph
from .ingest import ContextSeries, DatasetSplit, FlowSeries

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    phase1_epochs: int = 60
    phase2_epochs: int = 40
    joint_epochs: int = 0  # end-to-end fine-tune on the head loss after phase 2
    patience: int = 10
    dropout_rate: float = 0.05
    seed: int = 0
    compute_dtype: str = "float64"

    def __post_init__(self):
        if self.compute_dtype not in ("float64", "float32"):
            raise ValueError("compute_dtype must be float64 or float32")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def mse_loss(prediction: np.ndarray, target: np.ndarray) -> float:
    prediction = np.asarray(prediction, float)
    target = np.asarray(target, float)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch {prediction.shape} vs {target.shape}")
    return float(np.mean((prediction - target) ** 2))


def mse_grad(prediction: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (prediction - target) / prediction.size


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig,
              names: Sequence[str] | None = None) -> tuple[dict, AdamState]:
    """Bias-corrected Adam update of ``params[names]`` in place."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for k in (params if names is None else names):
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[k] -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
    return params, state


@dataclass
class TrainedModel:
    """Everything needed to forecast: weights, graphs and the standardisation."""

    shape: nw.NetworkShape
    params: dict
    stacked: np.ndarray | None       # (G, N, N) normalized adjacencies
    graph_kinds: tuple[str, ...]
    flow_mean: np.ndarray            # (N, C)
    flow_std: np.ndarray             # (N, C)
    context_mean: np.ndarray         # (K,)
    context_std: np.ndarray          # (K,)
    dropout_rate: float = 0.05
    fingerprint: str = ""
    dtype: str = "float64"  # compute precision; parameters are held in this dtype

    def __post_init__(self):
        dt = np.dtype(self.dtype)
        self.params = {k: np.asarray(v, dtype=dt) for k, v in self.params.items()}
        if self.stacked is not None:
            self.stacked = np.asarray(self.stacked, dtype=dt)

    def copy(self) -> "TrainedModel":
        return TrainedModel(self.shape, {k: v.copy() for k, v in self.params.items()}, self.stacked,
                            self.graph_kinds, self.flow_mean, self.flow_std, self.context_mean,
                            self.context_std, self.dropout_rate, self.fingerprint, self.dtype)

    def standardize(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, float) - self.flow_mean) / self.flow_std

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return z * self.flow_std + self.flow_mean

    def standardize_context(self, ctx: np.ndarray) -> np.ndarray:
        return (np.asarray(ctx, float) - self.context_mean) / self.context_std

    def windows(self, values: np.ndarray, context: np.ndarray, targets: np.ndarray):
        """Network inputs for target hours: (M, L, N, C) history and (M, K) context."""
        x, ctx = make_windows(self.standardize(values), self.standardize_context(context), targets,
                              self.shape.history)
        return x.astype(self.dtype), ctx.astype(self.dtype)

    def forward(self, x, ctx, masks=None, decoder=False, head=True, conv=None, on_step=None):
        return nw.forward(self.params, self.shape, self.stacked, x, ctx, masks,
                          decoder=decoder, head=head, conv=conv, on_step=on_step)

    def predict(self, values, context, targets, output: str = "head", batch: int = 512) -> np.ndarray:
        """Deterministic forecasts in flow units, clamped at zero. Shape (M, N, C)."""
        return np.maximum(self.predict_raw(values, context, targets, output, batch), 0.0)

    def predict_raw(self, values, context, targets, output: str = "head", batch: int = 512) -> np.ndarray:
        x, ctx = self.windows(values, context, np.asarray(targets))
        outs = []
        for s in range(0, len(x), batch):
            c = self.forward(x[s:s + batch], ctx[s:s + batch], decoder=output == "decoder",
                             head=output == "head")
            outs.append(c.head_out if output == "head" else c.decoder_out)
        z = np.concatenate(outs) if outs else np.zeros((0, self.shape.n_stations, self.shape.channels))
        return self.destandardize(z)


def make_windows(z: np.ndarray, ctx: np.ndarray, targets: np.ndarray, history: int):
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) and targets.min() < history:
        raise DataError(f"target hour {targets.min()} has fewer than {history} hours of history")
    offsets = np.arange(-history, 0)
    x = z[targets[:, None] + offsets[None, :]]
    return x, ctx[targets]


def window_targets(hours: range, history: int) -> np.ndarray:
    """Target hours whose whole history lies inside ``hours``."""
    return np.arange(hours.start + history, hours.stop)


def fit_scaler(values: np.ndarray, train: range):
    v = np.asarray(values, float)[train.start:train.stop]
    mean = v.mean(axis=0)
    std = v.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)
    return mean, std


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def add(self, **rec):
        self.records.append(rec)
        log.info("phase %s epoch %d loss %.5f val_rmse %.4f", rec["phase"], rec["epoch"], rec["loss"],
                 rec["val_rmse"])

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2)))


def _snapshot(params: dict, names) -> dict:
    return {k: params[k].copy() for k in names}


def train(config: TrainConfig, split: DatasetSplit, graphs: Sequence[StationGraph], flows: FlowSeries,
          context: ContextSeries, shape: nw.NetworkShape | None = None,
          fingerprint: str = "") -> tuple[TrainedModel, TrainLog]:
    """Train the full model and return the best-validation weights.

    ``graphs`` are normalized graphs built from the training range; an empty
    sequence trains the no-graph variant. Phase 1 fits fusion, filter,
    encoder, decoder and readout on the decoder loss; phase 2 fits the head
    with everything else frozen.
    """
    values = flows.values.astype(np.float64)
    T, N, C = values.shape
    if context.values.shape[0] != T:
        raise DataError("context and flow series have different lengths")
    if shape is None:
        shape = nw.NetworkShape(n_stations=N, n_graphs=len(graphs), channels=C,
                                context_width=context.width)
    if shape.n_graphs != len(graphs) or shape.n_stations != N or shape.context_width != context.width:
        raise DataError("network shape disagrees with the graphs, flows or context supplied")

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    rng_init, rng_shuffle, rng_drop = (np.random.default_rng(s) for s in seeds)

    flow_mean, flow_std = fit_scaler(values, split.train)
    ctx_mean, ctx_std = fit_scaler(context.values, split.train)
    stacked = np.stack([g.adjacency for g in graphs]) if graphs else None
    model = TrainedModel(shape, nw.init_params(shape, rng_init), stacked, tuple(g.kind for g in graphs),
                         flow_mean, flow_std, ctx_mean, ctx_std, config.dropout_rate, fingerprint,
                         config.compute_dtype)
    stacked = model.stacked

    L = shape.history
    tr_t = window_targets(split.train, L)
    va_t = window_targets(split.validation, L)
    if len(tr_t) == 0 or len(va_t) == 0:
        raise DataError("training or validation range is shorter than the history length")
    x_tr, c_tr = model.windows(values, context.values, tr_t)
    y_tr = model.standardize(values[tr_t]).astype(model.dtype)
    x_va, c_va = model.windows(values, context.values, va_t)
    y_va = values[va_t]

    trainlog = TrainLog()
    rate = config.dropout_rate
    encoder_side = [k for k in nw.ENCODER_SIDE if k in model.params]
    head_side = shape.head_names

    def val_rmse(output: str) -> float:
        z = []
        for s in range(0, len(x_va), 512):
            c = model.forward(x_va[s:s + 512], c_va[s:s + 512], decoder=output == "decoder",
                              head=output == "head")
            z.append(c.decoder_out if output == "decoder" else c.head_out)
        return _rmse(np.maximum(model.destandardize(np.concatenate(z)), 0.0), y_va)

    def run_phase(phase: str, names: list, epochs: int, step_fn, output: str):
        nonlocal model
        state = AdamState()
        best = (val_rmse(output), _snapshot(model.params, names))
        stale = 0
        for epoch in range(epochs):
            t0 = time.perf_counter()
            order = rng_shuffle.permutation(len(tr_t))
            total, count = 0.0, 0
            for s in range(0, len(order), config.batch_size):
                idx = order[s:s + config.batch_size]
                loss, grads = step_fn(idx)
                if not np.isfinite(loss):
                    model.params.update(best[1])
                    raise DivergenceError(f"non-finite loss in phase {phase} epoch {epoch}", last_good=model)
                adam_step(model.params, grads, state, config, names)
                total += loss * len(idx)
                count += len(idx)
            score = val_rmse(output)
            trainlog.add(epoch=epoch, phase=phase, loss=total / count, val_rmse=score,
                         seconds=time.perf_counter() - t0)
            if score < best[0]:
                best, stale = (score, _snapshot(model.params, names)), 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
        model.params.update(best[1])

    def masks_for(n_seq: int, encoder: bool, head: bool):
        if rate <= 0:
            return None
        return nw.sample_variational_masks(rate, n_seq, shape, rng_drop, encoder=encoder, head=head,
                                           dtype=model.dtype)

    def phase1_step(idx):
        x = x_tr[idx]
        m = masks_for(len(idx) * N, True, False)
        cache = model.forward(x, None, m, decoder=True, head=False)
        out = cache.decoder_out
        g = nw.backward(model.params, shape, stacked, cache, d_decoder=mse_grad(out, y_tr[idx]))
        return mse_loss(out, y_tr[idx]), g

    run_phase("1", encoder_side, config.phase1_epochs, phase1_step, "decoder")

    frozen_conv = nw.convolve_windows(model.params, stacked, x_tr)[0]

    def phase2_step(idx):
        m = masks_for(len(idx) * N, True, True)
        cache = model.forward(x_tr[idx], c_tr[idx], m, decoder=False, head=True, conv=frozen_conv[idx])
        out = cache.head_out
        g = nw.backward(model.params, shape, stacked, cache, d_head=mse_grad(out, y_tr[idx]), head_only=True)
        return mse_loss(out, y_tr[idx]), g

    run_phase("2", head_side, config.phase2_epochs, phase2_step, "head")

    if config.joint_epochs:
        def joint_step(idx):
            m = masks_for(len(idx) * N, True, True)
            cache = model.forward(x_tr[idx], c_tr[idx], m, decoder=False, head=True)
            out = cache.head_out
            g = nw.backward(model.params, shape, stacked, cache, d_head=mse_grad(out, y_tr[idx]))
            return mse_loss(out, y_tr[idx]), g

        run_phase("joint", encoder_side + head_side, config.joint_epochs, joint_step, "head")

    return model, trainlog


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
