import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bikeflow import network as nw
from bikeflow.errors import DivergenceError

from helpers import gradient_check, reference_lstm, tiny_instance


def lstm(wx, wh, b):
    return nw.LstmParams(np.asarray(wx, float), np.asarray(wh, float), np.asarray(b, float))


def test_zero_everything_gives_zero_hidden():
    p = lstm(np.zeros((2, 8)), np.zeros((2, 8)), np.zeros(8))
    (h, c), _ = nw.lstm_step(p, np.zeros((1, 2)), (np.zeros((1, 2)), np.zeros((1, 2))))
    assert np.all(h == 0) and np.all(c == 0)


def test_saturated_forget_gate_preserves_cell():
    H = 2
    b = np.zeros(4 * H)
    b[H:2 * H] = 1e3        # forget gate -> 1
    b[:H] = -1e3            # input gate -> 0
    p = lstm(np.zeros((2, 4 * H)), np.zeros((H, 4 * H)), b)
    c0 = np.array([[0.3, -0.7]])
    state = (np.zeros((1, H)), c0)
    for _ in range(5):
        state, _ = nw.lstm_step(p, np.ones((1, 2)), state)
    np.testing.assert_allclose(state[1], c0, atol=1e-12)


def test_hand_set_instance_matches_textbook_recurrence():
    # hidden 2, input 2, weights chosen by hand
    wx = np.array([[0.5, -0.3, 0.2, 0.1, 0.4, -0.6, 0.3, 0.7],
                   [-0.2, 0.8, -0.5, 0.3, 0.1, 0.2, -0.4, 0.5]])
    wh = np.array([[0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, -0.8],
                   [0.3, -0.1, 0.2, -0.2, 0.4, 0.1, -0.3, 0.2]])
    b = np.array([0.1, -0.1, 1.0, 1.0, 0.0, 0.2, -0.2, 0.3])
    xs = np.array([[1.0, -1.0], [0.5, 2.0], [-0.3, 0.1]])
    state = (np.zeros((1, 2)), np.zeros((1, 2)))
    for x in xs:
        state, _ = nw.lstm_step(lstm(wx, wh, b), x[None], state)
    h_ref, c_ref = reference_lstm(wx, wh, b, xs, np.zeros(2), np.zeros(2))
    np.testing.assert_allclose(state[0][0], h_ref, atol=1e-12, rtol=0)
    np.testing.assert_allclose(state[1][0], c_ref, atol=1e-12, rtol=0)


def test_init_params_follow_conventions():
    shape = nw.NetworkShape(n_stations=5, hidden=4)
    p = nw.init_params(shape, np.random.default_rng(0))
    assert np.all(p["fusion_logits"] == 0)
    assert np.all(np.abs(p["conv_filter"] - 1) <= 0.01)
    assert np.all(p["enc_b"][4:8] == 1) and np.all(p["enc_b"][:4] == 0)
    assert {k: v.shape for k, v in p.items()} == shape.param_shapes()
    assert p["head_w0"].shape == (4 + 3, 32) and p["head_w2"].shape == (16, 2)


def test_no_graph_shape_has_no_fusion_params():
    assert "conv_filter" not in nw.NetworkShape(n_stations=3, n_graphs=0).param_shapes()


def encoder(rng, H=3, C=2):
    return lstm(rng.normal(size=(C, 4 * H)), rng.normal(size=(H, 4 * H)), rng.normal(size=4 * H))


def test_encode_single_step_equals_lstm_step():
    rng = np.random.default_rng(1)
    p = encoder(rng)
    x = rng.normal(size=(1, 4, 2))
    (h, c), _ = nw.encode(p, x)
    (h1, c1), _ = nw.lstm_step(p, x[0], (np.zeros((4, 3)), np.zeros((4, 3))))
    assert np.array_equal(h, h1) and np.array_equal(c, c1)


def test_encode_identical_sequences_share_state_and_is_deterministic():
    rng = np.random.default_rng(2)
    p = encoder(rng)
    seq = rng.normal(size=(6, 1, 2))
    x = np.concatenate([seq, seq], axis=1)
    (h, _), _ = nw.encode(p, x)
    assert np.array_equal(h[0], h[1])
    (h2, _), _ = nw.encode(p, x)
    assert np.array_equal(h, h2)


def test_variational_mask_is_same_object_every_step():
    rng = np.random.default_rng(3)
    shape = nw.NetworkShape(n_stations=2, hidden=3)
    masks = nw.sample_variational_masks(0.5, 2, shape, rng)
    seen = []
    nw.encode(encoder(rng), rng.normal(size=(6, 2, 2)), masks, on_step=lambda t, mx, mh: seen.append((mx, mh)))
    assert len(seen) == 6
    assert seen[0][0] is seen[-1][0] and seen[0][1] is seen[-1][1]


def test_decode_zero_steps_reads_encoder_state():
    rng = np.random.default_rng(4)
    p = encoder(rng)
    h = rng.normal(size=(2, 3))
    rw, rb = rng.normal(size=(3, 2)), rng.normal(size=2)
    out, _ = nw.decode(p, rw, rb, (h, np.zeros((2, 3))), np.zeros((0, 2, 2)))
    np.testing.assert_allclose(out, h @ rw + rb)


def test_decode_zero_readout_gives_zero():
    rng = np.random.default_rng(5)
    out, _ = nw.decode(encoder(rng), np.zeros((3, 2)), np.zeros(2), (np.ones((2, 3)), np.ones((2, 3))),
                       rng.normal(size=(3, 2, 2)))
    assert np.all(out == 0)


def test_decode_matches_textbook_recurrence():
    rng = np.random.default_rng(6)
    enc, dec = encoder(rng), encoder(rng)
    xs = rng.normal(size=(6, 1, 2))
    state, _ = nw.encode(enc, xs)
    rw, rb = rng.normal(size=(3, 2)), rng.normal(size=2)
    out, _ = nw.decode(dec, rw, rb, state, xs[3:])
    h, c = reference_lstm(enc.wx, enc.wh, enc.b, xs[:, 0], np.zeros(3), np.zeros(3))
    h, c = reference_lstm(dec.wx, dec.wh, dec.b, xs[3:, 0], h, c)
    np.testing.assert_allclose(out[0], h @ rw + rb, atol=1e-12)


def head_params(rng, widths=(3, 2, 2, 1)):
    p = {}
    for i in range(len(widths) - 1):
        p[f"head_w{i}"] = rng.normal(size=(widths[i], widths[i + 1]))
        p[f"head_b{i}"] = rng.normal(size=widths[i + 1])
    return p


def test_head_zero_hidden_weights_gives_output_bias():
    rng = np.random.default_rng(7)
    p = head_params(rng)
    p["head_w0"][:] = 0
    p["head_w1"][:] = 0
    p["head_b0"][:] = 0
    p["head_b1"][:] = 0
    out, _ = nw.head_predict(p, rng.normal(size=(4, 2)), rng.normal(size=(4, 1)))
    np.testing.assert_allclose(out, np.broadcast_to(p["head_b2"], (4, 1)))


def test_head_matches_hand_evaluation():
    p = {"head_w0": np.array([[1.0, -1.0], [0.5, 2.0]]), "head_b0": np.array([0.0, -1.0]),
         "head_w1": np.array([[2.0], [1.0]]), "head_b1": np.array([0.5])}
    out, _ = nw.head_predict(p, np.array([[1.0]]), np.array([[2.0]]))
    # layer 1: [1*1 + 2*0.5, -1 + 4 - 1] = [2, 2]; output 2*2 + 2 + 0.5
    assert out[0, 0] == pytest.approx(6.5)
    out, _ = nw.head_predict(p, np.array([[-3.0]]), np.array([[0.0]]))
    # layer 1: [-3, 3 - 1] -> relu [0, 2]; output 2 + 0.5
    assert out[0, 0] == pytest.approx(2.5)


def test_rate_zero_masks_are_ones_and_seeded():
    shape = nw.NetworkShape(n_stations=3, hidden=4)
    m = nw.sample_variational_masks(0.0, 3, shape, np.random.default_rng(0))
    assert np.all(m.enc_x == 1) and np.all(m.enc_h == 1) and all(np.all(h == 1) for h in m.head)
    a = nw.sample_variational_masks(0.3, 3, shape, np.random.default_rng(9))
    b = nw.sample_variational_masks(0.3, 3, shape, np.random.default_rng(9))
    assert np.array_equal(a.enc_h, b.enc_h) and np.array_equal(a.head[1], b.head[1])


def test_inverted_scaling_preserves_mean():
    m = nw._bernoulli(np.random.default_rng(0), 0.5, (1_000_000,), np.float64)
    assert abs(m.mean() - 1.0) < 0.01
    assert set(np.unique(m)) == {0.0, 2.0}


def test_dropout_config_validation():
    with pytest.raises(ValueError):
        nw.DropoutConfig(rate=1.0)
    assert not nw.DropoutConfig(rate=0.0, mode="sampled").active


def test_rate_zero_sampled_equals_off():
    shape, params, stacked, windows, ctx, _, _, _ = tiny_instance(0)
    masks = nw.sample_variational_masks(0.0, windows.shape[0] * 4, shape, np.random.default_rng(0))
    a = nw.forward(params, shape, stacked, windows, ctx, masks)
    b = nw.forward(params, shape, stacked, windows, ctx, None)
    assert np.array_equal(a.head_out, b.head_out) and np.array_equal(a.decoder_out, b.decoder_out)


def test_no_graph_variant_feeds_raw_windows():
    shape, params, _, windows, ctx, _, _, _ = tiny_instance(0)
    c = nw.forward(params, shape, None, windows, ctx)
    assert c.conv is windows and c.fused is None


@settings(max_examples=10, deadline=None)
@given(st.permutations(range(4)))
def test_station_permutation_equivariance(perm):
    """Without graph mixing, permuting stations permutes outputs."""
    perm = np.array(perm)
    shape, params, _, windows, ctx, _, _, _ = tiny_instance(1)
    a = nw.forward(params, shape, None, windows, ctx)
    b = nw.forward(params, shape, None, windows[:, :, perm], ctx)
    np.testing.assert_allclose(b.head_out, a.head_out[:, perm], atol=1e-12)
    np.testing.assert_allclose(b.decoder_out, a.decoder_out[:, perm], atol=1e-12)


def test_gradients_match_finite_differences_with_masks():
    errors = gradient_check(seed=11, rate=0.3)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, (worst, errors[worst])


def test_unused_parameters_get_exact_zero_gradient():
    shape, params, stacked, windows, ctx, _, d_dec, d_head = tiny_instance(2)
    cache = nw.forward(params, shape, stacked, windows, ctx, decoder=False, head=True)
    g = nw.backward(params, shape, stacked, cache, d_head=d_head, head_only=True)
    for name in nw.ENCODER_SIDE:
        assert np.all(g[name] == 0), name
    assert np.any(g["head_w0"] != 0)
    cache = nw.forward(params, shape, stacked, windows, ctx, decoder=True, head=False)
    g = nw.backward(params, shape, stacked, cache, d_decoder=d_dec)
    assert all(np.all(g[k] == 0) for k in shape.head_names)


def test_gradient_is_linear_in_loss_scale():
    shape, params, stacked, windows, ctx, _, d_dec, d_head = tiny_instance(3)
    cache = nw.forward(params, shape, stacked, windows, ctx)
    g1 = nw.backward(params, shape, stacked, cache, d_decoder=d_dec, d_head=d_head)
    g2 = nw.backward(params, shape, stacked, cache, d_decoder=2 * d_dec, d_head=2 * d_head)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)


def test_non_finite_gradient_names_tensor():
    with pytest.raises(DivergenceError, match="conv_filter"):
        nw._check({"conv_filter": np.array([np.nan])})
