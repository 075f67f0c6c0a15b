"""Graph-convolved LSTM encoder-decoder with a context-conditioned FC head.

Everything is plain numpy with hand-written reverse-mode gradients. Each
station is one sequence in the batch; LSTM and head weights are shared
across stations, so spatial mixing happens only in the graph convolution.

Sequences are laid out window-major: sequence ``s = b * N + n`` is station
``n`` of window ``b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from .errors import DivergenceError
from .fusion import fuse_backward, softmax_weights

ENCODER_SIDE = ("fusion_logits", "conv_filter", "enc_wx", "enc_wh", "enc_b",
                "dec_wx", "dec_wh", "dec_b", "readout_w", "readout_b")


@dataclass(frozen=True)
class NetworkShape:
    n_stations: int
    n_graphs: int = 3  # 0 feeds raw flows straight into the encoder
    channels: int = 2
    hidden: int = 64
    history: int = 6
    decoder_steps: int = 3
    context_width: int = 3
    head_widths: tuple[int, ...] = (32, 16)

    def __post_init__(self):
        if not self.history >= self.decoder_steps >= 0:
            raise ValueError("need history >= decoder_steps >= 0")
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))

    @property
    def head_names(self) -> list[str]:
        return [name for i in range(len(self.head_widths) + 1) for name in (f"head_w{i}", f"head_b{i}")]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        n, c, h = self.n_stations, self.channels, self.hidden
        shapes: dict[str, tuple[int, ...]] = {}
        if self.n_graphs:
            shapes["fusion_logits"] = (self.n_graphs, n, n)
            shapes["conv_filter"] = (n, n)
        for side in ("enc", "dec"):
            shapes[f"{side}_wx"] = (c, 4 * h)
            shapes[f"{side}_wh"] = (h, 4 * h)
            shapes[f"{side}_b"] = (4 * h,)
        shapes["readout_w"] = (h, c)
        shapes["readout_b"] = (c,)
        widths = (h + self.context_width, *self.head_widths, c)
        for i in range(len(widths) - 1):
            shapes[f"head_w{i}"] = (widths[i], widths[i + 1])
            shapes[f"head_b{i}"] = (widths[i + 1],)
        return shapes


def init_params(shape: NetworkShape, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameters.

    Fusion logits start at zero (equal graph weights) and the conv filter at
    ones plus U(-0.01, 0.01), so the initial effective filter is the fused
    graph itself. LSTM weights are U(-1/sqrt(H), 1/sqrt(H)) with forget bias 1.
    """
    h = shape.hidden
    params: dict[str, np.ndarray] = {}
    for name, shp in shape.param_shapes().items():
        if name == "fusion_logits":
            params[name] = np.zeros(shp)
        elif name == "conv_filter":
            params[name] = 1.0 + rng.uniform(-0.01, 0.01, shp)
        elif name.endswith(("_wx", "_wh")):
            params[name] = rng.uniform(-1 / np.sqrt(h), 1 / np.sqrt(h), shp)
        elif name in ("enc_b", "dec_b"):
            b = np.zeros(shp)
            b[h:2 * h] = 1.0
            params[name] = b
        elif name.startswith(("head_w", "readout_w")):
            fan_in = shp[0]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shp) * (0.5 if name == "readout_w" else 1.0)
        else:
            params[name] = np.zeros(shp)
    return params


@dataclass(frozen=True)
class DropoutConfig:
    rate: float = 0.05
    mode: str = "off"  # "off" | "sampled"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.mode not in ("off", "sampled"):
            raise ValueError(f"unknown dropout mode {self.mode!r}")

    @property
    def active(self) -> bool:
        return self.mode == "sampled" and self.rate > 0


@dataclass
class Masks:
    """Dropout masks for one batch of sequences.

    ``enc_x``/``enc_h`` are variational: one row per sequence, reused at every
    encoder step. ``head`` holds one mask per hidden FC layer.
    """

    enc_x: np.ndarray | None = None
    enc_h: np.ndarray | None = None
    head: tuple = ()

    def head_mask(self, i: int):
        return self.head[i] if i < len(self.head) else None


def _bernoulli(rng: np.random.Generator, rate: float, shape, dtype) -> np.ndarray:
    if rate == 0.0:
        return np.ones(shape, dtype=dtype)
    return ((rng.random(shape) >= rate) / (1.0 - rate)).astype(dtype)


def sample_variational_masks(rate: float, n_seq: int, shape: NetworkShape, rng: np.random.Generator,
                             encoder: bool = True, head: bool = True, dtype=np.float64) -> Masks:
    """Inverted-scaling Bernoulli masks, one per sequence and input site."""
    masks = Masks()
    if encoder:
        masks.enc_x = _bernoulli(rng, rate, (n_seq, shape.channels), dtype)
        masks.enc_h = _bernoulli(rng, rate, (n_seq, shape.hidden), dtype)
    if head:
        masks.head = tuple(_bernoulli(rng, rate, (n_seq, w), dtype) for w in shape.head_widths)
    return masks


@lru_cache(maxsize=None)
def _gate_scale(hidden: int, dtype: str = "d") -> np.ndarray:
    # sigmoid(z) = (1 + tanh(z / 2)) / 2, so one tanh call serves all four gates
    scale = np.full(4 * hidden, 0.5, dtype=dtype)
    scale[2 * hidden:3 * hidden] = 1.0
    return scale


@dataclass(frozen=True)
class LstmParams:
    wx: np.ndarray  # (input, 4H), gate blocks ordered input, forget, cell, output
    wh: np.ndarray  # (H, 4H)
    b: np.ndarray   # (4H,)

    @property
    def hidden(self) -> int:
        return self.wh.shape[0]

    @classmethod
    def from_params(cls, params: dict, prefix: str) -> "LstmParams":
        return cls(params[f"{prefix}_wx"], params[f"{prefix}_wh"], params[f"{prefix}_b"])


def lstm_step(p: LstmParams, x, state, mask_x=None, mask_h=None):
    """One LSTM step for a batch. Returns ``((h, c), cache)``."""
    h, c = state
    H = p.hidden
    xm = x if mask_x is None else x * mask_x
    hm = h if mask_h is None else h * mask_h
    z = xm @ p.wx
    z += hm @ p.wh
    z += p.b
    z *= _gate_scale(H, z.dtype.char)
    act = np.tanh(z, out=z)
    g = act[:, 2 * H:3 * H].copy()
    act *= 0.5
    act += 0.5
    act[:, 2 * H:3 * H] = g
    i, f, o = act[:, :H], act[:, H:2 * H], act[:, 3 * H:]
    c_new = f * c
    c_new += i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    if not np.isfinite(c_new).all():
        raise DivergenceError("non-finite LSTM state")
    return (h_new, c_new), (xm, hm, c, act, tc, mask_x, mask_h)


def lstm_step_backward(p: LstmParams, cache, dh, dc, grads: dict, prefix: str):
    """Accumulate parameter gradients into ``grads``; return (dx, dh_prev, dc_prev)."""
    xm, hm, c, act, tc, mask_x, mask_h = cache
    H = p.hidden
    i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
    dct = o * (1.0 - tc * tc)
    dct *= dh
    dct += dc
    dz = np.empty_like(act)
    dz[:, :H] = g
    dz[:, H:2 * H] = c
    dz[:, 2 * H:3 * H] = i
    dz[:, :3 * H] *= np.tile(dct, 3)
    dz[:, 3 * H:] = dh * tc
    deriv = 1.0 - act
    deriv *= act
    deriv[:, 2 * H:3 * H] = 1.0 - g * g
    dz *= deriv
    grads[f"{prefix}_wx"] += xm.T @ dz
    grads[f"{prefix}_wh"] += hm.T @ dz
    grads[f"{prefix}_b"] += dz.sum(axis=0)
    dx = dz @ p.wx.T
    dh_prev = dz @ p.wh.T
    if mask_x is not None:
        dx *= mask_x
    if mask_h is not None:
        dh_prev *= mask_h
    return dx, dh_prev, dct * f


def encode(p: LstmParams, inputs: np.ndarray, masks: Masks | None = None,
           on_step: Callable | None = None):
    """Roll the encoder over ``inputs`` of shape (L, S, C) from a zero state.

    Returns the final ``(h, c)`` and the per-step caches. ``on_step(t, mask_x,
    mask_h)`` is an instrumentation hook called before every step.
    """
    L, S, _ = inputs.shape
    if L < 1:
        raise ValueError("encoder needs at least one step")
    state = (np.zeros((S, p.hidden), dtype=inputs.dtype), np.zeros((S, p.hidden), dtype=inputs.dtype))
    mx = masks.enc_x if masks is not None else None
    mh = masks.enc_h if masks is not None else None
    caches = []
    for t in range(L):
        if on_step is not None:
            on_step(t, mx, mh)
        state, cache = lstm_step(p, inputs[t], state, mx, mh)
        caches.append(cache)
    return state, caches


def decode(p: LstmParams, readout_w, readout_b, enc_state, inputs: np.ndarray):
    """Decoder rolled over ``inputs`` (T, S, C) from the encoder state, then a linear readout.

    With T = 0 the readout is applied to the encoder hidden state directly.
    """
    state = enc_state
    caches = []
    for t in range(inputs.shape[0]):
        state, cache = lstm_step(p, inputs[t], state)
        caches.append(cache)
    return state[0] @ readout_w + readout_b, (state[0], caches)


def head_predict(params: dict, hidden: np.ndarray, context: np.ndarray | None,
                 masks: tuple = (), n_layers: int | None = None):
    """FC head over ``[hidden, context]`` rows; rectifier between layers, identity output.

    ``masks`` are standard dropout masks applied to the hidden activations.
    Returns ``(output, cache)``.
    """
    if n_layers is None:
        n_layers = sum(1 for k in params if k.startswith("head_w"))
    a = hidden if context is None or context.shape[1] == 0 else np.concatenate([hidden, context], axis=1)
    acts = [a]
    relu_masks = []
    for i in range(n_layers):
        z = a @ params[f"head_w{i}"] + params[f"head_b{i}"]
        if i == n_layers - 1:
            a = z
            break
        pos = z > 0
        a = z * pos
        m = masks[i] if i < len(masks) else None
        if m is not None:
            a = a * m
        relu_masks.append((pos, m))
        acts.append(a)
    return a, (acts, relu_masks)


def head_backward(params: dict, cache, dout, grads: dict) -> np.ndarray:
    """Accumulate head gradients; return the gradient w.r.t. the head input rows."""
    acts, relu_masks = cache
    n_layers = len(acts)
    d = dout
    for i in reversed(range(n_layers)):
        grads[f"head_w{i}"] += acts[i].T @ d
        grads[f"head_b{i}"] += d.sum(axis=0)
        d = d @ params[f"head_w{i}"].T
        if i > 0:
            pos, m = relu_masks[i - 1]
            if m is not None:
                d = d * m
            d = d * pos
    return d


@dataclass
class ForwardCache:
    windows: np.ndarray          # (B, L, N, C) network-space inputs
    conv: np.ndarray             # (B, L, N, C) graph-convolved inputs
    fused: np.ndarray | None     # (N, N)
    enc_state: tuple
    enc_caches: list
    dec_caches: list | None = None
    dec_hidden: np.ndarray | None = None
    head_cache: tuple | None = None
    decoder_out: np.ndarray | None = None  # (B, N, C)
    head_out: np.ndarray | None = None     # (B, N, C)
    extras: dict = field(default_factory=dict)


def convolve_windows(params: dict, stacked: np.ndarray | None, windows: np.ndarray):
    """Graph-convolve every snapshot of a (B, L, N, C) window batch.

    Returns ``(conv, fused)``; without graphs the inputs pass through unchanged.
    """
    if stacked is None or "fusion_logits" not in params:
        return windows, None
    fused = np.einsum("gij,gij->ij", softmax_weights(params["fusion_logits"]), stacked)
    return np.matmul(fused * params["conv_filter"], windows), fused


def to_sequences(x: np.ndarray) -> np.ndarray:
    """(B, L, N, C) -> (L, B*N, C)."""
    b, l, n, c = x.shape
    return x.transpose(1, 0, 2, 3).reshape(l, b * n, c)


def from_sequences(x: np.ndarray, b: int, n: int) -> np.ndarray:
    """(L, B*N, C) -> (B, L, N, C)."""
    l, _, c = x.shape
    return x.reshape(l, b, n, c).transpose(1, 0, 2, 3)


def forward(params: dict, shape: NetworkShape, stacked: np.ndarray | None, windows: np.ndarray,
            context: np.ndarray | None = None, masks: Masks | None = None,
            decoder: bool = True, head: bool = True, conv: np.ndarray | None = None,
            on_step: Callable | None = None) -> ForwardCache:
    """Full forward pass over a (B, L, N, C) window batch in network units.

    ``context`` is (B, K). ``conv`` may carry precomputed graph-convolved
    inputs (they do not depend on dropout).
    """
    B, L, N, C = windows.shape
    fused = None
    if conv is None:
        conv, fused = convolve_windows(params, stacked, windows)
    seq = to_sequences(conv)
    enc = LstmParams.from_params(params, "enc")
    enc_state, enc_caches = encode(enc, seq, masks, on_step)
    cache = ForwardCache(windows, conv, fused, enc_state, enc_caches)
    if decoder:
        T = shape.decoder_steps
        dec = LstmParams.from_params(params, "dec")
        out, (h_last, dec_caches) = decode(dec, params["readout_w"], params["readout_b"], enc_state, seq[L - T:])
        cache.dec_caches, cache.dec_hidden = dec_caches, h_last
        cache.decoder_out = out.reshape(B, N, C)
    if head:
        ctx = None if context is None else np.repeat(context, N, axis=0)
        out, hc = head_predict(params, enc_state[0], ctx, masks.head if masks is not None else (),
                               len(shape.head_widths) + 1)
        cache.head_cache = hc
        cache.head_out = out.reshape(B, N, C)
    return cache


def backward(params: dict, shape: NetworkShape, stacked: np.ndarray | None, cache: ForwardCache,
             d_decoder: np.ndarray | None = None, d_head: np.ndarray | None = None,
             head_only: bool = False) -> dict[str, np.ndarray]:
    """Gradients for every parameter given output gradients of shape (B, N, C).

    Parameters that do not influence the supplied outputs get exact zeros.
    With ``head_only`` the head gradient is not propagated into the encoder.
    """
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    B, L, N, C = cache.windows.shape
    S = B * N
    H = shape.hidden
    dt = cache.windows.dtype
    dh = np.zeros((S, H), dtype=dt)
    dc = np.zeros((S, H), dtype=dt)
    d_seq = np.zeros((L, S, C), dtype=dt)
    touched_encoder = False

    if d_head is not None:
        d_in = head_backward(params, cache.head_cache, d_head.reshape(S, C), grads)
        if not head_only:
            dh += d_in[:, :H]
            touched_encoder = True

    if d_decoder is not None:
        T = shape.decoder_steps
        d_out = d_decoder.reshape(S, C)
        grads["readout_w"] += cache.dec_hidden.T @ d_out
        grads["readout_b"] += d_out.sum(axis=0)
        dh_dec = d_out @ params["readout_w"].T
        dc_dec = np.zeros((S, H), dtype=dt)
        dec = LstmParams.from_params(params, "dec")
        for t in reversed(range(T)):
            dx, dh_dec, dc_dec = lstm_step_backward(dec, cache.dec_caches[t], dh_dec, dc_dec, grads, "dec")
            d_seq[L - T + t] += dx
        dh += dh_dec
        dc += dc_dec
        touched_encoder = True

    if not touched_encoder:
        return _check(grads)

    enc = LstmParams.from_params(params, "enc")
    for t in reversed(range(L)):
        dx, dh, dc = lstm_step_backward(enc, cache.enc_caches[t], dh, dc, grads, "enc")
        d_seq[t] += dx

    if cache.fused is not None:
        d_conv = from_sequences(d_seq, B, N)
        d_eff = np.einsum("blic,bljc->ij", d_conv, cache.windows)
        grads["conv_filter"] += d_eff * cache.fused
        grads["fusion_logits"] += fuse_backward(params["fusion_logits"], stacked, d_eff * params["conv_filter"])
    return _check(grads)


def _check(grads: dict) -> dict:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
    return grads
