import numpy as np
import pytest

from bikeflow import graphs as gr
from bikeflow.experiment import training_graphs
from bikeflow.ingest import split_dataset
from bikeflow.network import NetworkShape
from bikeflow.synth import SynthConfig, generate
from bikeflow.train import TrainConfig, train


@pytest.fixture(scope="session")
def small_city():
    """Six stations over 125 days: just enough hours for the default split."""
    return generate(SynthConfig(n_stations=6, n_communities=2, days=125, seed=3))


@pytest.fixture(scope="session")
def small_model(small_city):
    city = small_city
    split = split_dataset(city.flows)
    graphs = training_graphs(city, split)
    shape = NetworkShape(n_stations=6, n_graphs=3, hidden=8, context_width=city.context.width)
    cfg = TrainConfig(phase1_epochs=2, phase2_epochs=2, batch_size=64, seed=5, dropout_rate=0.1)
    model, log = train(cfg, split, list(graphs.values()), city.flows, city.context, shape)
    return model, log, split


def random_graph(rng, n, kind="distance", zero_rows=0):
    a = rng.random((n, n)) * (rng.random((n, n)) < 0.7)
    np.fill_diagonal(a, 0.0)
    a[:zero_rows] = 0.0
    return gr.StationGraph(kind, a)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
