"""Softmax-weighted fusion of normalized graphs and the graph convolution."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError
from .graphs import StationGraph


@dataclass(frozen=True)
class FusedGraph:
    matrix: np.ndarray
    provenance: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def stack_graphs(graphs: Sequence[StationGraph]) -> np.ndarray:
    """(G, N, N) array of normalized adjacencies."""
    if not graphs:
        raise DataError("fusion needs at least one graph")
    shapes = {g.adjacency.shape for g in graphs}
    if len(shapes) != 1:
        raise DataError(f"graphs disagree on shape: {sorted(shapes)}")
    unnormalized = [g.kind for g in graphs if not g.normalized]
    if unnormalized:
        raise DataError(f"graphs must be normalized before fusion: {unnormalized}")
    return np.stack([g.adjacency for g in graphs])


def softmax_weights(logits: np.ndarray) -> np.ndarray:
    """Element-wise softmax across the graph axis (axis 0)."""
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def fuse_arrays(logits: np.ndarray, stacked: np.ndarray) -> np.ndarray:
    if logits.shape != stacked.shape:
        raise DataError(f"fusion logits {logits.shape} do not match graphs {stacked.shape}")
    return np.einsum("gij,gij->ij", softmax_weights(logits), stacked)


def fuse(logits: np.ndarray, graphs: Sequence[StationGraph]) -> FusedGraph:
    return FusedGraph(fuse_arrays(np.asarray(logits, float), stack_graphs(graphs)), tuple(g.kind for g in graphs))


def fuse_backward(logits: np.ndarray, stacked: np.ndarray, d_fused: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the logits given its gradient w.r.t. F."""
    w = softmax_weights(logits)
    fused = np.einsum("gij,gij->ij", w, stacked)
    return w * (stacked - fused) * d_fused


def graph_convolve(fused, conv_filter: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """``(F * W_c) @ H0`` applied to every (N, C) snapshot in ``h0``.

    ``h0`` may carry leading batch axes: shape (..., N, C).
    """
    f = fused.matrix if isinstance(fused, FusedGraph) else fused
    h0 = np.asarray(h0, dtype=float)
    if not (np.all(np.isfinite(h0)) and np.all(np.isfinite(conv_filter))):
        raise DataError("graph convolution inputs must be finite")
    return np.matmul(f * conv_filter, h0)
