"""Command-line pipeline: synth -> ingest -> graphs -> train -> predict / evaluate.

Stages hand off through files in the configured output directory. Every
artifact has a JSON sidecar carrying the fingerprint of the settings that
produced it; downstream stages refuse artifacts whose fingerprint does not
match the current configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import blobs
from . import graphs as gr
from . import ingest
from . import uncertainty as unc
from .config import PipelineConfig
from .errors import BikeflowError, ConfigError, DataError, SchemaError
from .evaluate import VARIANTS, evaluate_model
from .fusion import fuse_arrays
from .network import NetworkShape
from .train import TrainConfig, train, window_targets

log = logging.getLogger("bikeflow")

FLOWS, REGISTRY, CONTEXT, TRIPS = "flows.bin", "registry.csv", "context.csv", "trips.npy"
CHECKPOINT = "model.ckpt"


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_meta(path: Path, stage: str) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"missing {stage} artifacts ({path}); run `bikeflow {stage}` first") from None


def _verify(meta: dict, expected: str, stage: str) -> None:
    found = meta.get("fingerprint")
    if found != expected:
        raise ConfigError(f"{stage} artifacts were built with fingerprint {found} but the current config "
                          f"expects {expected}; rerun `bikeflow {stage}`")


def _split(cfg: PipelineConfig, n_hours: int) -> ingest.DatasetSplit:
    return ingest.split_dataset(n_hours, cfg["split"]["test_days"], cfg["split"]["validation_days"])


def _load_ingested(cfg: PipelineConfig):
    out = cfg.output_dir
    meta = _read_meta(out / "ingest.json", "ingest")
    _verify(meta, cfg.ingest_fingerprint(), "ingest")
    flows = blobs.read_flows(out / FLOWS)
    registry = ingest.StationRegistry.from_csv(out / REGISTRY)
    ctx = pd.read_csv(out / CONTEXT)
    context = ingest.ContextSeries(tuple(ctx.columns[1:]), ctx.iloc[:, 1:].to_numpy(dtype=float))
    return flows, registry, context


def _train_config(cfg: PipelineConfig) -> TrainConfig:
    return TrainConfig(**{k: v for k, v in cfg["train"].items()})


# commands -----------------------------------------------------------------

def cmd_synth(args, cfg: PipelineConfig) -> int:
    from .synth import SynthConfig, generate, write_city

    fields = dict(cfg["synth"])
    for key in ("seed", "days", "n_stations"):
        if getattr(args, key) is not None:
            fields[key] = getattr(args, key)
    try:
        sc = SynthConfig(**fields)
    except TypeError as exc:
        raise ConfigError(f"bad synth settings: {exc}") from None
    city = generate(sc)
    out = Path(args.out)
    paths = write_city(city, out)
    config = {"paths": {"records": [Path(paths["records"]).name], "stations": Path(paths["stations"]).name,
                        "weather": Path(paths["weather"]).name, "output_dir": "artifacts"},
              "schema": "nyc"}
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=True))
    print(f"wrote {len(city.records)} ride records for {sc.n_stations} stations over {sc.days} days to {out}")
    return 0


def cmd_ingest(args, cfg: PipelineConfig) -> int:
    schema = ingest.SCHEMAS[cfg["schema"]] if cfg["schema"] in ingest.SCHEMAS else None
    if schema is None:
        raise ConfigError(f"unknown schema {cfg['schema']!r}; choose from {sorted(ingest.SCHEMAS)}")
    parts = []
    for f in cfg.record_files():
        try:
            parts.append(ingest.parse_ride_records(f, schema))
        except SchemaError as exc:
            raise SchemaError(f"{f}: line 1 (header): {exc}") from None
        except DataError as exc:
            raise DataError(f"{f}: {exc}") from None
    records = ingest.concat_records(parts)
    if len(records) == 0:
        raise DataError("no valid ride records in the inputs")
    registry = ingest.build_station_registry(records, cfg.optional_path("stations"))
    flows = ingest.bin_flows(records, registry)
    context = ingest.load_context_features(cfg.optional_path("weather"), flows.start_hour, flows.n_hours)

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    blobs.write_flows(out / FLOWS, flows)
    registry.to_csv(out / REGISTRY)
    ctx = pd.DataFrame(context.values, columns=list(context.columns))
    ctx.insert(0, "hour", flows.hours.strftime("%Y-%m-%d %H:%M"))
    ctx.to_csv(out / CONTEXT, index=False, float_format="%.10g")
    df = records.records
    trips = np.column_stack([
        (df["start_time"].to_numpy().astype("datetime64[h]") - flows.start_hour) // ingest.HOUR,
        (df["end_time"].to_numpy().astype("datetime64[h]") - flows.start_hour) // ingest.HOUR,
        registry.index_of(df["start_station_id"].to_numpy()),
        registry.index_of(df["end_station_id"].to_numpy()),
    ]).astype(np.int64)
    np.save(out / TRIPS, trips)
    summary = {"fingerprint": cfg.ingest_fingerprint(), "records": len(records), "skipped": records.skipped,
               "stations": len(registry), "first_hour": str(flows.start_hour),
               "last_hour": str(flows.start_hour + (flows.n_hours - 1) * ingest.HOUR), "hours": flows.n_hours,
               "context_columns": list(context.columns)}
    _write_json(out / "ingest.json", summary)
    print(f"parsed {summary['records']} records ({summary['skipped']} skipped), {summary['stations']} stations, "
          f"{summary['hours']} hours from {summary['first_hour']} to {summary['last_hour']}")
    return 0


def build_training_graphs(cfg: PipelineConfig, flows, registry, trips: np.ndarray, split) -> dict:
    """Graphs of the configured kinds, using only hours inside the training range."""
    if len(registry) < 2:
        raise DataError("graph construction needs at least 2 stations")
    train_end = split.train.stop
    built = {}
    for kind in cfg["graphs"]["kinds"]:
        if kind == "distance":
            built[kind] = gr.build_distance_graph(registry)
        elif kind == "interaction":
            keep = trips[:, 1] < train_end
            ids = np.asarray(registry.ids, dtype=object)
            df = pd.DataFrame({"start_station_id": ids[trips[keep, 2]], "end_station_id": ids[trips[keep, 3]]})
            built[kind] = gr.build_interaction_graph(df, registry)
        else:
            built[kind] = gr.build_correlation_graph(flows.restrict(split.train), cfg["graphs"]["correlation_usage"])
    return built


def cmd_graphs(args, cfg: PipelineConfig) -> int:
    flows, registry, _ = _load_ingested(cfg)
    out = cfg.output_dir
    trips = np.load(out / TRIPS)
    split = _split(cfg, flows.n_hours)
    built = build_training_graphs(cfg, flows, registry, trips, split)
    summary = {"fingerprint": cfg.graphs_fingerprint(), "upstream": cfg.ingest_fingerprint(),
               "split": split.as_dict(), "graphs": {}}
    for kind, g in built.items():
        blobs.write_graph(out / f"graph_{kind}.bin", g)
        blobs.write_matrix_csv(out / f"graph_{kind}.csv", g.adjacency, registry.ids)
        summary["graphs"][kind] = gr.graph_summary(g)
    _write_json(out / "graphs.json", summary)
    for kind, s in summary["graphs"].items():
        print(f"{kind:<12} " + " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                                        for k, v in sorted(s.items())))
    return 0


def cmd_train(args, cfg: PipelineConfig) -> int:
    flows, registry, context = _load_ingested(cfg)
    out = cfg.output_dir
    gmeta = _read_meta(out / "graphs.json", "graphs")
    _verify(gmeta, cfg.graphs_fingerprint(), "graphs")
    split = _split(cfg, flows.n_hours)
    kinds = VARIANTS[cfg["variant"]]
    chosen = [gr.normalize_adjacency(blobs.read_graph(out / f"graph_{k}.bin")) for k in kinds]
    m = cfg["model"]
    shape = NetworkShape(n_stations=flows.n_stations, n_graphs=len(chosen), channels=2, hidden=m["hidden"],
                         history=m["history"], decoder_steps=m["decoder_steps"], context_width=context.width,
                         head_widths=tuple(m["head_widths"]))
    fp = cfg.train_fingerprint()
    model, trainlog = train(_train_config(cfg), split, chosen, flows, context, shape, fp)
    blobs.write_checkpoint(out / CHECKPOINT, model, {"variant": cfg["variant"], "split": split.as_dict()})
    (out / "train_log.jsonl").write_text(trainlog.to_jsonl())
    if model.stacked is not None:
        fused = fuse_arrays(np.asarray(model.params["fusion_logits"], float), np.asarray(model.stacked, float))
        blobs.write_fused(out / "graph_fused.bin", fused)
        blobs.write_matrix_csv(out / "graph_fused.csv", fused, registry.ids)
    best = {p: min(r["val_rmse"] for r in trainlog.records if r["phase"] == p)
            for p in sorted({r["phase"] for r in trainlog.records})}
    _write_json(out / "train.json", {"fingerprint": fp, "upstream": cfg.graphs_fingerprint(),
                                     "variant": cfg["variant"], "epochs": len(trainlog.records),
                                     "best_val_rmse": best})
    print(f"trained {cfg['variant']} model for {len(trainlog.records)} epochs; best validation RMSE "
          + ", ".join(f"phase {p}: {v:.4f}" for p, v in best.items()))
    return 0


def _load_model(cfg: PipelineConfig, path):
    model, extra = blobs.read_checkpoint(path)
    expected = cfg.train_fingerprint()
    if model.fingerprint != expected:
        raise ConfigError(f"checkpoint {path} has fingerprint {model.fingerprint} but the current config "
                          f"expects {expected}; the hyperparameters differ")
    return model, extra


def _hour_targets(flows, start, end, default: np.ndarray) -> np.ndarray:
    if start is None and end is None:
        return default
    lo = flows.hour_index(start) if start is not None else 0
    hi = flows.hour_index(end) if end is not None else flows.n_hours
    if not 0 <= lo < hi <= flows.n_hours:
        raise DataError(f"hour range [{start}, {end}) lies outside the flow series")
    return np.arange(lo, hi)


def cmd_predict(args, cfg: PipelineConfig) -> int:
    flows, registry, context = _load_ingested(cfg)
    out = cfg.output_dir
    model, _ = _load_model(cfg, Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT)
    split = _split(cfg, flows.n_hours)
    L = model.shape.history
    targets = _hour_targets(flows, args.start, args.end, window_targets(split.test, L))
    if len(targets) and targets.min() < L:
        raise DataError(f"forecast hours need {L} hours of history; start at hour index {L} or later")
    iterations = args.iterations if args.iterations is not None else cfg["uncertainty"]["iterations"]
    u = cfg["uncertainty"]
    hours = flows.start_hour + targets * ingest.HOUR
    if iterations < 2:
        log.warning("B=%d dropout iterations: writing point forecasts without intervals", iterations)
        point = model.predict(flows.values, context.values, targets)
        frame = unc.forecast_frame(hours, registry.ids, point)
    else:
        est = unc.estimate(model, flows.values, context.values, targets, window_targets(split.validation, L),
                           iterations, u["seed"], u["alpha"])
        frame = unc.forecast_frame(hours, registry.ids, est.point, est.interval(), est.sigma_model,
                                   est.sigma_noise)
    path = unc.write_forecast_csv(Path(args.out) if args.out else out / "forecast.csv", frame)
    _write_json(path.with_suffix(".json"), {"fingerprint": model.fingerprint, "iterations": iterations,
                                            "alpha": u["alpha"], "seed": u["seed"], "rows": len(frame)})
    print(f"wrote {len(frame)} forecast rows to {path}")
    return 0


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    flows, registry, context = _load_ingested(cfg)
    out = cfg.output_dir
    model, extra = _load_model(cfg, Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT)
    split = _split(cfg, flows.n_hours)
    u = cfg["uncertainty"]
    iterations = args.iterations if args.iterations is not None else u["iterations"]
    cov = None
    if iterations >= 2:
        L = model.shape.history
        targets = window_targets(split.test, L)
        est = unc.estimate(model, flows.values, context.values, targets, window_targets(split.validation, L),
                           iterations, u["seed"], u["alpha"])
        cov = unc.coverage(*est.interval(), flows.values[targets])
    report = evaluate_model(model, flows, context, split, extra.get("variant", cfg["variant"]), cov)
    path = Path(args.out) if args.out else out / "report.json"
    path.write_text(report.to_json())
    sys.stdout.write(report.table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bikeflow", description="Multi-graph station flow forecasting")
    parser.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="pipeline YAML config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.seed=3 (repeatable)")
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate the planted-structure synthetic dataset")
    p.add_argument("--out", required=True, help="directory for the CSVs and a starter config.yaml")
    p.add_argument("--seed", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--stations", dest="n_stations", type=int)
    add("ingest", cmd_ingest, "parse ride records and weather into flow tensors")
    add("graphs", cmd_graphs, "build the station graphs from the training range")
    p = add("train", cmd_train, "train the forecaster")
    p.add_argument("--variant", choices=sorted(VARIANTS), help="graph set to train with")
    for name, fn, text in (("predict", cmd_predict, "write forecasts with confidence intervals"),
                           ("evaluate", cmd_evaluate, "score the checkpoint on the test range")):
        p = add(name, fn, text)
        p.add_argument("--checkpoint", help="checkpoint path (default: output_dir/model.ckpt)")
        p.add_argument("--iterations", type=int, help="MC dropout passes B (default from config)")
        p.add_argument("--out", help="output path")
        p.add_argument("--variant", choices=sorted(VARIANTS), help="graph set the checkpoint was trained with")
        if name == "predict":
            p.add_argument("--start", help="first forecast hour, e.g. '2017-06-01 00:00' (default: test range)")
            p.add_argument("--end", help="end of the forecast range, exclusive")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = getattr(logging, str(args.log_level).upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)
    try:
        overrides = list(args.set)
        if getattr(args, "variant", None):
            overrides.append(f"variant={args.variant}")
        cfg = PipelineConfig.load(args.config, overrides, require_inputs=args.command == "ingest")
        return args.func(args, cfg)
    except BikeflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
