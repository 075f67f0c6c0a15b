import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from bikeflow import evaluate as ev
from bikeflow.errors import ConfigError, DataError
from bikeflow.experiment import training_graphs
from bikeflow.ingest import split_dataset
from bikeflow.synth import SynthConfig, generate
from bikeflow.train import TrainConfig


def test_rmse_worked_example():
    assert ev.rmse([1, 2, 3, 4], [4, 5, 6, 7]) == pytest.approx(3.0)
    # errors (3, 4): sqrt((9 + 16) / 2)
    assert ev.rmse([3, 4], [0, 0]) == pytest.approx(np.sqrt(12.5))
    assert ev.rmse([3, 4], [0, 0]) == pytest.approx(3.5355, abs=1e-4)
    assert ev.rmse([[1.5]], [[1.5]]) == 0.0


def test_rmse_rejects_bad_inputs():
    with pytest.raises(DataError):
        ev.rmse([], [])
    with pytest.raises(DataError):
        ev.rmse([1, 2], [1, 2, 3])


finite = st.floats(-1e3, 1e3)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(float, st.integers(1, 20), elements=finite), hnp.arrays(float, st.integers(1, 20), elements=finite))
def test_rmse_pools_over_concatenation(a, b):
    # squared RMSE of a concatenation is the size-weighted mean of the parts
    pa, pb = np.zeros_like(a), np.zeros_like(b)
    whole = ev.rmse(np.concatenate([pa, pb]), np.concatenate([a, b])) ** 2
    parts = (len(a) * ev.rmse(pa, a) ** 2 + len(b) * ev.rmse(pb, b) ** 2) / (len(a) + len(b))
    assert whole == pytest.approx(parts, rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(float, st.integers(1, 30), elements=finite))
def test_rmse_is_symmetric_and_non_negative(a):
    b = a[::-1]
    assert ev.rmse(a, b) == ev.rmse(b, a) >= 0


def test_top_k_examples():
    v = np.zeros((2, 4, 2))
    v[:, :, 0] = [[1, 5, 3, 5], [0, 1, 0, 1]]   # totals 1, 6, 3, 6
    assert list(ev.top_k_stations(v, 2)) == [1, 3]
    assert list(ev.top_k_stations(v, 4)) == [1, 3, 2, 0]
    for bad in (0, 5):
        with pytest.raises(ConfigError):
            ev.top_k_stations(v, bad)


def hours(start, n):
    return np.datetime64(start, "h") + np.arange(n)


def test_historical_mean_same_weekday_and_hour():
    # two weeks hourly from Monday 2024-01-01; Monday 9am holds 4 and 6
    h = hours("2024-01-01T00", 24 * 14)
    v = np.ones((len(h), 1, 2))
    v[9, 0] = 4
    v[24 * 7 + 9, 0] = 6
    out = ev.historical_mean_baseline(v, h, np.array(["2024-01-15T09"], dtype="datetime64[h]"))
    assert out[0, 0, 0] == pytest.approx(5.0)
    out = ev.historical_mean_baseline(v, h, np.array(["2024-01-16T09"], dtype="datetime64[h]"))
    assert out[0, 0, 0] == pytest.approx(1.0)


def test_historical_mean_separates_weekdays_from_weekends():
    h = hours("2024-01-01T00", 24 * 14)
    weekday = ((h.astype(np.int64) // 24 + 3) % 7) < 5
    v = np.where(weekday, 10.0, 2.0)[:, None, None] * np.ones((1, 1, 2))
    q = hours("2024-01-15T00", 24 * 7)
    out = ev.historical_mean_baseline(v, h, q)[:, 0, 0]
    assert np.all(out[:24 * 5] == 10.0) and np.all(out[24 * 5:] == 2.0)


def test_historical_mean_fallbacks():
    h = hours("2024-01-01T00", 24)           # Monday only
    v = np.arange(24, dtype=float)[:, None, None] * np.ones((1, 1, 2))
    tue = ev.historical_mean_baseline(v, h, np.array(["2024-01-02T05"], dtype="datetime64[h]"))
    assert tue[0, 0, 0] == 5.0                # hour-of-day fallback
    with pytest.raises(DataError):
        ev.historical_mean_baseline(np.zeros((0, 1, 2)), h[:0], h)


def test_build_report_fields():
    rng = np.random.default_rng(0)
    actual = rng.poisson(5, size=(10, 3, 2)).astype(float)
    pred = actual + 1.0
    r = ev.build_report("multi", pred, actual, actual, {"zero": np.zeros_like(actual)}, 0.9, top_ks=(2, 10))
    assert r.overall_rmse == pytest.approx(1.0) and r.inflow_rmse == pytest.approx(1.0)
    assert r.per_station_rmse == pytest.approx([1.0, 1.0, 1.0])
    assert set(r.top_k_rmse) == {"2", "3"}
    assert r.baselines["zero"]["overall_rmse"] == pytest.approx(ev.rmse(0 * actual, actual))
    assert "interval coverage 0.9000" in r.table()
    assert '"variant": "multi"' in r.to_json()


def test_unknown_variant_is_config_error(small_city):
    with pytest.raises(ConfigError):
        ev.ablation_run("everything", TrainConfig(), None, {}, small_city.flows, small_city.context)
    with pytest.raises(ConfigError):
        ev.ablation_run("distance", TrainConfig(), None, {}, small_city.flows, small_city.context)


def test_evaluation_is_deterministic(small_city, small_model):
    model, _, split = small_model
    a = ev.evaluate_model(model, small_city.flows, small_city.context, split)
    b = ev.evaluate_model(model, small_city.flows, small_city.context, split)
    assert a.to_json() == b.to_json()


def test_trained_model_beats_historical_mean():
    city = generate(SynthConfig(n_stations=6, n_communities=2, days=180, seed=3))
    split = split_dataset(city.flows)
    cfg = TrainConfig(phase1_epochs=3, phase2_epochs=3)
    report, _, _ = ev.ablation_run("multi", cfg, split, training_graphs(city, split), city.flows, city.context,
                                   hidden=16)
    assert report.overall_rmse < report.baselines["historical_mean"]["overall_rmse"]


def test_ablation_run_shares_inputs(small_city):
    split = split_dataset(small_city.flows)
    graphs = training_graphs(small_city, split)
    cfg = TrainConfig(phase1_epochs=1, phase2_epochs=1, batch_size=128)
    report, model, _ = ev.ablation_run("none", cfg, split, graphs, small_city.flows, small_city.context, hidden=4)
    assert report.variant == "none" and model.shape.n_graphs == 0
    report, model, _ = ev.ablation_run("correlation", cfg, split, graphs, small_city.flows, small_city.context,
                                       hidden=4)
    assert model.graph_kinds == ("correlation",)
