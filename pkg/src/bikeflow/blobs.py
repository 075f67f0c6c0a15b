"""Binary artifacts: flow tensors, graphs and checkpoints.

All layouts are little-endian with a 4-byte magic and a format version.

flow blob:   magic "BFLW", u16 version, u32 N, u32 T, u16 C, i64 start (epoch seconds),
             then T*N*C u32 counts in (hour, station, channel) order.
graph blob:  magic "BGRF", u16 version, u8 kind tag, u8 normalized, u32 N,
             then N*N f64 weights row-major.
checkpoint:  magic "BCKP", u16 version, u32 header length, UTF-8 JSON header
             (hyperparameters and a tensor table of name/shape/offset), then the
             f64 tensors back to back.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import pandas as pd

from . import network as nw
from .errors import DataError
from .graphs import StationGraph
from .ingest import FlowSeries
from .train import TrainedModel

VERSION = 1
FLOW_MAGIC, GRAPH_MAGIC, CKPT_MAGIC = b"BFLW", b"BGRF", b"BCKP"
GRAPH_TAGS = ("distance", "interaction", "correlation", "fused")

_FLOW_HEAD = struct.Struct("<4sHIIHq")
_GRAPH_HEAD = struct.Struct("<4sHBBI")
_CKPT_HEAD = struct.Struct("<4sHI")


def _check_magic(found: bytes, expected: bytes, version: int, path) -> None:
    if found != expected:
        raise DataError(f"{path}: not a {expected.decode()} file (magic {found!r})")
    if version != VERSION:
        raise DataError(f"{path}: unsupported format version {version}")


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing artifact {path}") from None


def encode_flows(flows: FlowSeries) -> bytes:
    v = np.asarray(flows.values)
    if v.size and v.max() > np.iinfo(np.uint32).max:
        raise DataError("flow counts exceed the u32 range of the blob format")
    T, N, C = v.shape
    start = int(flows.start_hour.astype("datetime64[s]").astype(np.int64))
    return _FLOW_HEAD.pack(FLOW_MAGIC, VERSION, N, T, C, start) + v.astype("<u4").tobytes()


def decode_flows(data: bytes, source="<bytes>") -> FlowSeries:
    if len(data) < _FLOW_HEAD.size:
        raise DataError(f"{source}: truncated flow blob")
    magic, version, N, T, C, start = _FLOW_HEAD.unpack_from(data)
    _check_magic(magic, FLOW_MAGIC, version, source)
    payload = data[_FLOW_HEAD.size:]
    if len(payload) != T * N * C * 4:
        raise DataError(f"{source}: payload holds {len(payload)} bytes, expected {T * N * C * 4}")
    values = np.frombuffer(payload, dtype="<u4").reshape(T, N, C).astype(np.int64)
    return FlowSeries(np.datetime64(start, "s").astype("datetime64[h]"), values)


def write_flows(path, flows: FlowSeries) -> Path:
    path = Path(path)
    path.write_bytes(encode_flows(flows))
    return path


def read_flows(path) -> FlowSeries:
    return decode_flows(_read(path), path)


def encode_graph(kind: str, matrix: np.ndarray, normalized: bool) -> bytes:
    if kind not in GRAPH_TAGS:
        raise DataError(f"unknown graph kind {kind!r}")
    m = np.asarray(matrix, dtype="<f8")
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DataError(f"graph matrix must be square, got {m.shape}")
    return _GRAPH_HEAD.pack(GRAPH_MAGIC, VERSION, GRAPH_TAGS.index(kind), int(normalized), m.shape[0]) + m.tobytes()


def decode_graph(data: bytes, source="<bytes>") -> tuple[str, np.ndarray, bool]:
    if len(data) < _GRAPH_HEAD.size:
        raise DataError(f"{source}: truncated graph blob")
    magic, version, tag, normalized, N = _GRAPH_HEAD.unpack_from(data)
    _check_magic(magic, GRAPH_MAGIC, version, source)
    if tag >= len(GRAPH_TAGS):
        raise DataError(f"{source}: unknown graph tag {tag}")
    payload = data[_GRAPH_HEAD.size:]
    if len(payload) != N * N * 8:
        raise DataError(f"{source}: payload holds {len(payload)} bytes, expected {N * N * 8}")
    return GRAPH_TAGS[tag], np.frombuffer(payload, dtype="<f8").reshape(N, N).copy(), bool(normalized)


def write_graph(path, graph: StationGraph) -> Path:
    path = Path(path)
    path.write_bytes(encode_graph(graph.kind, graph.adjacency, graph.normalized))
    return path


def read_graph(path) -> StationGraph:
    kind, m, normalized = decode_graph(_read(path), path)
    if kind == "fused":
        raise DataError(f"{path}: holds a fused graph, not a station graph")
    return StationGraph(kind, m, normalized)


def write_fused(path, matrix: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(encode_graph("fused", matrix, True))
    return path


def write_matrix_csv(path, matrix: np.ndarray, station_ids) -> Path:
    """Export a matrix with station ids on both axes, for external plotting tools."""
    path = Path(path)
    pd.DataFrame(np.asarray(matrix), index=list(station_ids), columns=list(station_ids)).to_csv(
        path, float_format="%.10g", index_label="station_id")
    return path


def _tensors(model: TrainedModel) -> dict:
    out = {f"param/{k}": v for k, v in model.params.items()}
    out.update({"scale/flow_mean": model.flow_mean, "scale/flow_std": model.flow_std,
                "scale/context_mean": model.context_mean, "scale/context_std": model.context_std})
    if model.stacked is not None:
        out["graphs/stacked"] = model.stacked
    return out


def encode_checkpoint(model: TrainedModel, extra: dict | None = None) -> bytes:
    """Serialize a trained model. Tensors are widened to f64, which is exact for f32 and f64."""
    table, chunks, offset = [], [], 0
    for name, arr in _tensors(model).items():
        raw = np.ascontiguousarray(np.asarray(arr, dtype="<f8")).tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    s = model.shape
    header = {
        "shape": {"n_stations": s.n_stations, "n_graphs": s.n_graphs, "channels": s.channels, "hidden": s.hidden,
                  "history": s.history, "decoder_steps": s.decoder_steps, "context_width": s.context_width,
                  "head_widths": list(s.head_widths)},
        "graph_kinds": list(model.graph_kinds),
        "dropout_rate": model.dropout_rate,
        "fingerprint": model.fingerprint,
        "dtype": model.dtype,
        "extra": extra or {},
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _CKPT_HEAD.pack(CKPT_MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def decode_checkpoint(data: bytes, source="<bytes>") -> tuple[TrainedModel, dict]:
    if len(data) < _CKPT_HEAD.size:
        raise DataError(f"{source}: truncated checkpoint")
    magic, version, hlen = _CKPT_HEAD.unpack_from(data)
    _check_magic(magic, CKPT_MAGIC, version, source)
    start = _CKPT_HEAD.size + hlen
    try:
        header = json.loads(data[_CKPT_HEAD.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: corrupt checkpoint header ({exc})") from None
    try:
        model = _model_from_header(header, data[start:], source)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{source}: malformed checkpoint header ({exc!r})") from None
    return model, header.get("extra", {})


def _model_from_header(header: dict, body: bytes, source) -> TrainedModel:
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        lo = entry["offset"]
        if lo + 8 * count > len(body):
            raise DataError(f"{source}: tensor {entry['name']} runs past the end of the file")
        tensors[entry["name"]] = np.frombuffer(body, "<f8", count, lo).reshape(entry["shape"]).copy()
    sh = header["shape"]
    shape = nw.NetworkShape(sh["n_stations"], sh["n_graphs"], sh["channels"], sh["hidden"], sh["history"],
                            sh["decoder_steps"], sh["context_width"], tuple(sh["head_widths"]))
    params = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("param/")}
    expected = shape.param_shapes()
    if {k: tuple(v.shape) for k, v in params.items()} != {k: tuple(v) for k, v in expected.items()}:
        raise DataError(f"{source}: parameter table does not match the stored network shape")
    model = TrainedModel(shape, params, tensors.get("graphs/stacked"), tuple(header["graph_kinds"]),
                         tensors["scale/flow_mean"], tensors["scale/flow_std"], tensors["scale/context_mean"],
                         tensors["scale/context_std"], header["dropout_rate"], header["fingerprint"],
                         header["dtype"])
    return model


def write_checkpoint(path, model: TrainedModel, extra: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(model, extra))
    return path


def read_checkpoint(path) -> tuple[TrainedModel, dict]:
    return decode_checkpoint(_read(path), path)
