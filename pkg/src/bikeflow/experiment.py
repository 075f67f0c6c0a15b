"""Planted-structure ablation: train every graph-set variant on synthetic cities."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import graphs as gr
from .evaluate import VARIANTS, EvaluationReport, ablation_run
from .ingest import HOUR, split_dataset
from .synth import SynthConfig, SyntheticCity, generate
from .train import TrainConfig, TrainedModel


def training_graphs(city: SyntheticCity, split) -> dict:
    """Normalized distance, interaction and correlation graphs from the training range only."""
    end = np.datetime64(city.flows.start_hour + split.train.stop * HOUR)
    rec = city.records.records
    rec = rec[rec["end_time"] < end]
    built = {"distance": gr.build_distance_graph(city.registry),
             "interaction": gr.build_interaction_graph(rec, city.registry),
             "correlation": gr.build_correlation_graph(city.flows.restrict(split.train))}
    return {k: gr.normalize_adjacency(g) for k, g in built.items()}


@dataclass
class AblationResult:
    seeds: list
    reports: dict = field(default_factory=dict)   # variant -> [EvaluationReport per seed]
    models: dict = field(default_factory=dict)    # (variant, seed) -> TrainedModel
    cities: dict = field(default_factory=dict)    # seed -> SyntheticCity
    seconds: float = 0.0

    def rmse(self, variant: str) -> np.ndarray:
        return np.array([r.overall_rmse for r in self.reports[variant]])

    def median(self, variant: str) -> float:
        return float(np.median(self.rmse(variant)))


def planted_ablation(seeds: Sequence[int], train_config: TrainConfig, synth_config: SynthConfig = SynthConfig(),
                     variants: Sequence[str] = tuple(VARIANTS), hidden: int = 32,
                     keep_models: bool = True, keep_cities: bool = False) -> AblationResult:
    """Train and score each variant on one synthetic city per seed.

    The city, split and training seed are shared by all variants of a seed.
    """
    result = AblationResult(list(seeds), {v: [] for v in variants})
    t0 = time.perf_counter()
    for seed in seeds:
        city = generate(replace(synth_config, seed=seed))
        split = split_dataset(city.flows)
        graphs = training_graphs(city, split)
        cfg = replace(train_config, seed=seed)
        for v in variants:
            report, model, _ = ablation_run(v, cfg, split, graphs, city.flows, city.context, hidden=hidden)
            result.reports[v].append(report)
            if keep_models:
                result.models[(v, seed)] = model
        if keep_cities:
            result.cities[seed] = city
    result.seconds = time.perf_counter() - t0
    return result


__all__ = ["AblationResult", "EvaluationReport", "TrainedModel", "planted_ablation", "training_graphs"]
