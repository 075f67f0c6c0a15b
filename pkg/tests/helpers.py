"""Shared test oracles."""

import numpy as np

from bikeflow import graphs as gr
from bikeflow import network as nw


def tiny_instance(seed=0, n=4, hidden=8, batch=3, context=3, rate=0.0):
    """A 4-station float64 network with random graphs, windows and (optionally) fixed masks."""
    rng = np.random.default_rng(seed)
    shape = nw.NetworkShape(n_stations=n, n_graphs=3, hidden=hidden, context_width=context, head_widths=(6, 5))
    stacked = []
    for kind in gr.KINDS:
        a = rng.random((n, n))
        np.fill_diagonal(a, 0.0)
        stacked.append(gr.normalize_adjacency(gr.StationGraph(kind, a)).adjacency)
    stacked = np.stack(stacked)
    params = nw.init_params(shape, rng)
    # move away from the symmetric start so every tensor gets a generic gradient
    params["fusion_logits"] = rng.normal(0.0, 0.5, params["fusion_logits"].shape)
    params["readout_b"] = rng.normal(0.0, 0.1, params["readout_b"].shape)
    # zero head biases put all-dropped rows exactly on the rectifier kink
    for name in shape.head_names:
        if name.startswith("head_b"):
            params[name] = rng.normal(0.0, 0.3, params[name].shape)
    windows = rng.normal(size=(batch, shape.history, n, shape.channels))
    ctx = rng.normal(size=(batch, context))
    masks = nw.sample_variational_masks(rate, batch * n, shape, rng) if rate > 0 else None
    d_dec = rng.normal(size=(batch, n, shape.channels))
    d_head = rng.normal(size=(batch, n, shape.channels))
    return shape, params, stacked, windows, ctx, masks, d_dec, d_head


def gradient_check(seed=0, rate=0.3, eps=1e-6):
    """Relative error per tensor between analytic and central-difference gradients.

    The scalar objective is <d_dec, decoder_out> + <d_head, head_out>, so both
    outputs drive every parameter they depend on.
    """
    shape, params, stacked, windows, ctx, masks, d_dec, d_head = tiny_instance(seed, rate=rate)

    def objective(p):
        c = nw.forward(p, shape, stacked, windows, ctx, masks)
        return float(np.sum(c.decoder_out * d_dec) + np.sum(c.head_out * d_head))

    cache = nw.forward(params, shape, stacked, windows, ctx, masks)
    analytic = nw.backward(params, shape, stacked, cache, d_decoder=d_dec, d_head=d_head)
    errors = {}
    for name, value in params.items():
        numeric = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + eps
            up = objective(params)
            value[idx] = orig - eps
            dn = objective(params)
            value[idx] = orig
            numeric[idx] = (up - dn) / (2 * eps)
        a = analytic[name]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-12)
        errors[name] = float(np.linalg.norm(a - numeric) / scale)
    return errors


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def reference_lstm(wx, wh, b, xs, h, c):
    """Textbook LSTM recurrence, one sequence, gate blocks (i, f, g, o)."""
    H = len(h)
    for x in xs:
        z = x @ wx + h @ wh + b
        i, f = sigmoid(z[:H]), sigmoid(z[H:2 * H])
        g, o = np.tanh(z[2 * H:3 * H]), sigmoid(z[3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
    return h, c


ACCEPTANCE_LINES = []


def record(criterion, ok, detail):
    """Print and remember one PASS/FAIL line; the terminal summary repeats them."""
    line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
