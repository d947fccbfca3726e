"""Per-operation MAC counts, feature vectors and arithmetic intensity.

Work is counted in multiply-accumulates: one multiply-add is one unit.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import SchemaError, UnsupportedOpError
from .opgraph import (
    ADD, BATCH_NORM, CONV_KINDS, GELU, LAYER_NORM, LINEAR, MATMUL, MUL, POOL,
    RELU, RESHAPE, SILU, SOFTMAX, TRANSPOSE, OpGraph, OpNode, node_params,
)

FEATURE_SCHEMA_VERSION = 1

CONV_COLUMNS = ("C_in", "C_out", "H_out", "W_out", "kernel", "stride", "groups",
                "flops", "in_bytes", "out_bytes", "weight_bytes")
LINEAR_COLUMNS = ("tokens", "D_in", "D_out", "flops", "in_bytes", "out_bytes", "weight_bytes")
MATMUL_COLUMNS = ("M", "N", "K", "flops", "in_bytes", "out_bytes")
GENERIC_COLUMNS = ("elements", "flops", "in_bytes", "out_bytes", "channels")

ELEMENTWISE_KINDS = frozenset({GELU, SILU, RELU, ADD, MUL, LAYER_NORM, BATCH_NORM, POOL})
MOVEMENT_KINDS = frozenset({RESHAPE, TRANSPOSE})
SOFTMAX_MACS_PER_ELEMENT = 3


def columns_for(kind: str) -> tuple:
    """Ordered feature names for an operation kind."""
    if kind in CONV_KINDS:
        return CONV_COLUMNS
    if kind == LINEAR:
        return LINEAR_COLUMNS
    if kind == MATMUL:
        return MATMUL_COLUMNS
    if kind in ELEMENTWISE_KINDS or kind in MOVEMENT_KINDS or kind == SOFTMAX:
        return GENERIC_COLUMNS
    raise UnsupportedOpError(f"no feature rule for kind {kind!r}")


@dataclass(frozen=True)
class FeatureVector:
    kind: str
    conv_layout_tag: Optional[str]
    names: tuple
    values: tuple

    def __getitem__(self, name):
        return self.values[self.names.index(name)]

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values))

    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


def _conv_geometry(node: OpNode):
    x = node.inputs[0]
    y = node.output
    h_out, w_out = y.spatial
    return x.channels, y.channels, h_out, w_out, node.attrs["kernel_size"], node.attrs["stride"], node.attrs["groups"]


def flops(node: OpNode) -> int:
    """MAC count of a single node."""
    kind = node.kind
    if kind in CONV_KINDS:
        c_in, c_out, h, w, k, _, groups = _conv_geometry(node)
        return h * w * c_out * (c_in // groups) * k * k
    if kind == LINEAR:
        x = node.inputs[0]
        tokens = x.numel // x.dims[-1]
        return tokens * x.dims[-1] * node.output.dims[-1]
    if kind == MATMUL:
        a, b = node.inputs
        return a.dims[0] * a.dims[1] * a.dims[2] * b.dims[2]
    if kind == SOFTMAX:
        return SOFTMAX_MACS_PER_ELEMENT * node.output.numel
    if kind == POOL:
        return node.inputs[0].numel
    if kind in ELEMENTWISE_KINDS:
        return node.output.numel
    if kind in MOVEMENT_KINDS:
        return 0
    raise UnsupportedOpError(f"no FLOPs rule for kind {kind!r}")


def weight_bytes(node: OpNode) -> int:
    return node_params(node) * node.output.element_bytes


def in_bytes(node: OpNode) -> int:
    return sum(t.nbytes for t in node.inputs)


def traffic_bytes(node: OpNode) -> int:
    """Compulsory traffic estimate: inputs + output + weights, no cache reuse."""
    return in_bytes(node) + node.output.nbytes + weight_bytes(node)


def featurize(node: OpNode) -> FeatureVector:
    kind = node.kind
    names = columns_for(kind)
    f = flops(node)
    ib, ob = in_bytes(node), node.output.nbytes
    if kind in CONV_KINDS:
        c_in, c_out, h, w, k, s, g = _conv_geometry(node)
        vals = (c_in, c_out, h, w, k, s, g, f, ib, ob, weight_bytes(node))
    elif kind == LINEAR:
        x = node.inputs[0]
        vals = (x.numel // x.dims[-1], x.dims[-1], node.output.dims[-1], f, ib, ob, weight_bytes(node))
    elif kind == MATMUL:
        a, b = node.inputs
        vals = (a.dims[1], b.dims[2], a.dims[2], f, ib, ob)
    else:
        x = node.inputs[0]
        vals = (x.numel, f, ib, ob, x.channels)
    tag = node.conv_layout_tag if kind in CONV_KINDS else None
    return FeatureVector(kind, tag, names, tuple(float(v) for v in vals))


def graph_flops(graph: OpGraph) -> int:
    return sum(flops(n) for n in graph.nodes)


def graph_traffic(graph: OpGraph) -> int:
    return sum(traffic_bytes(n) for n in graph.nodes)


def arithmetic_intensity(flops: float, traffic_bytes: float) -> float:
    """Work per byte of memory traffic."""
    if not traffic_bytes > 0:
        raise ValueError(f"traffic must be positive, got {traffic_bytes}")
    return flops / traffic_bytes


def graph_intensity(graph: OpGraph) -> float:
    return arithmetic_intensity(graph_flops(graph), graph_traffic(graph))


def features_csv(rows) -> str:
    """CSV text for ``(model_id, node_id, FeatureVector)`` rows of one kind."""
    rows = list(rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if not rows:
        return ""
    names = rows[0][2].names
    writer.writerow(("model_id", "node_id", "conv_layout_tag") + names)
    for model_id, node_id, fv in rows:
        if fv.names != names:
            raise SchemaError(f"mixed feature schemas in one table: {fv.names} vs {names}")
        writer.writerow((model_id, node_id, fv.conv_layout_tag or "") + tuple(repr(v) for v in fv.values))
    return buf.getvalue()


def read_features_csv(text: str):
    """Inverse of :func:`features_csv`; returns (names, rows)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return (), []
    if tuple(header[:3]) != ("model_id", "node_id", "conv_layout_tag"):
        raise SchemaError(f"unexpected feature header {header[:3]}")
    names = tuple(header[3:])
    rows = []
    for rec in reader:
        rows.append((rec[0], int(rec[1]), rec[2] or None, tuple(float(v) for v in rec[3:])))
    return names, rows
