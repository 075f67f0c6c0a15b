import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from bikeflow import blobs
from bikeflow.errors import DataError
from bikeflow.graphs import StationGraph
from bikeflow.ingest import FlowSeries


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.int64, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6).map(lambda s: (s[0], s[1], 2)),
                  elements=st.integers(0, 2 ** 32 - 1)),
       st.integers(0, 400_000))
def test_flow_blob_round_trip(values, hour):
    flows = FlowSeries(np.datetime64(hour, "h"), values)
    back = blobs.decode_flows(blobs.encode_flows(flows))
    assert back.start_hour == flows.start_hour
    assert np.array_equal(back.values, flows.values)


def test_flow_blob_layout():
    flows = FlowSeries(np.datetime64("1970-01-01T01", "h"), np.array([[[1, 2]]]))
    data = blobs.encode_flows(flows)
    assert data[:4] == b"BFLW"
    assert len(data) == 4 + 2 + 4 + 4 + 2 + 8 + 8
    assert int.from_bytes(data[16:24], "little") == 3600
    assert data[-8:] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")


def test_flow_blob_rejects_overflow():
    with pytest.raises(DataError):
        blobs.encode_flows(FlowSeries(np.datetime64(0, "h"), np.full((1, 1, 2), 2 ** 32)))


def test_corrupt_or_truncated_blobs():
    data = blobs.encode_flows(FlowSeries(np.datetime64(0, "h"), np.ones((2, 2, 2), int)))
    with pytest.raises(DataError, match="not a BFLW"):
        blobs.decode_flows(b"XXXX" + data[4:])
    with pytest.raises(DataError):
        blobs.decode_flows(data[:-1])
    with pytest.raises(DataError):
        blobs.decode_flows(data[:5])
    bumped = data[:4] + (9).to_bytes(2, "little") + data[6:]
    with pytest.raises(DataError, match="version"):
        blobs.decode_flows(bumped)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(float, st.integers(1, 6).map(lambda n: (n, n)), elements=st.floats(-1e6, 1e6)),
       st.sampled_from(blobs.GRAPH_TAGS), st.booleans())
def test_graph_blob_round_trip(matrix, kind, normalized):
    k, m, nz = blobs.decode_graph(blobs.encode_graph(kind, matrix, normalized))
    assert (k, nz) == (kind, normalized)
    assert np.array_equal(m, matrix)


def test_graph_files(tmp_path):
    g = StationGraph("interaction", np.array([[0.0, 2.0], [2.0, 1.0]]), normalized=False)
    back = blobs.read_graph(blobs.write_graph(tmp_path / "g.bin", g))
    assert back.kind == "interaction" and not back.normalized
    assert np.array_equal(back.adjacency, g.adjacency)
    blobs.write_fused(tmp_path / "f.bin", np.eye(2))
    with pytest.raises(DataError):
        blobs.read_graph(tmp_path / "f.bin")
    with pytest.raises(DataError, match="missing"):
        blobs.read_graph(tmp_path / "absent.bin")
    with pytest.raises(DataError):
        blobs.encode_graph("bogus", np.eye(2), True)
    with pytest.raises(DataError):
        blobs.encode_graph("distance", np.ones((2, 3)), True)


def test_matrix_csv(tmp_path):
    p = blobs.write_matrix_csv(tmp_path / "m.csv", np.array([[0.5, 1.0], [0.0, 2.0]]), ["a", "b"])
    assert p.read_text().splitlines() == ["station_id,a,b", "a,0.5,1", "b,0,2"]


def test_checkpoint_is_bit_exact(small_model, tmp_path):
    model, _, _ = small_model
    path = blobs.write_checkpoint(tmp_path / "m.ckpt", model, {"note": 1})
    back, extra = blobs.read_checkpoint(path)
    assert extra == {"note": 1}
    assert back.shape == model.shape and back.graph_kinds == model.graph_kinds
    assert back.dropout_rate == model.dropout_rate and back.dtype == model.dtype
    for k, v in model.params.items():
        assert np.array_equal(back.params[k], v) and back.params[k].dtype == v.dtype, k
    assert np.array_equal(back.stacked, model.stacked)
    assert blobs.encode_checkpoint(back, {"note": 1}) == path.read_bytes()


def test_float32_checkpoint_round_trips_exactly(small_model):
    model, _, _ = small_model
    m32 = model.copy()
    m32.dtype = "float32"
    m32.__post_init__()
    back, _ = blobs.decode_checkpoint(blobs.encode_checkpoint(m32))
    for k, v in m32.params.items():
        assert np.array_equal(back.params[k], v) and back.params[k].dtype == np.float32


def test_corrupt_checkpoint(small_model):
    model, _, _ = small_model
    data = blobs.encode_checkpoint(model)
    with pytest.raises(DataError):
        blobs.decode_checkpoint(b"BFLW" + data[4:])
    with pytest.raises(DataError):
        blobs.decode_checkpoint(data[:-8])
    with pytest.raises(DataError, match="header"):
        blobs.decode_checkpoint(data[:12] + b"{" + data[13:])
    with pytest.raises(DataError, match="header"):
        blobs.decode_checkpoint(data[:10] + b"[" + data[11:])
