"""Lowering of sampled architectures into linear operation graphs.

Tensors carry a physical layout. The image enters as NCHW; a token sequence
turned back into a feature map is a view of ``[N, H*W, C]`` memory and is
therefore NHWC. Convolutions keep the layout of their input, and the layout a
convolution sees is recorded on the node as ``ChannelFirst``/``ChannelLast``.

Attention operands after the head split are stored as TOKENS3D tensors whose
leading axis is ``batch * heads``.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .archspace import ATTENTION, ArchConfig, validate_arch
from .errors import LoweringError, SchemaError

NCHW = "NCHW"
NHWC = "NHWC"
TOKENS3D = "TOKENS3D"
LAYOUTS = (NCHW, NHWC, TOKENS3D)

CHANNEL_FIRST = "ChannelFirst"
CHANNEL_LAST = "ChannelLast"

CONV2D = "Conv2d"
DWCONV2D = "DWConv2d"
PATCH_EMBED = "PatchEmbed"
LINEAR = "Linear"
MATMUL = "MatMul"
SOFTMAX = "Softmax"
LAYER_NORM = "LayerNorm"
BATCH_NORM = "BatchNorm"
GELU = "GELU"
SILU = "SiLU"
RELU = "ReLU"
ADD = "Add"
MUL = "Mul"
POOL = "Pool"
RESHAPE = "Reshape"
TRANSPOSE = "Transpose"

OP_KINDS = (
    CONV2D, DWCONV2D, LINEAR, MATMUL, SOFTMAX, LAYER_NORM, BATCH_NORM, GELU,
    SILU, RELU, ADD, MUL, POOL, RESHAPE, TRANSPOSE, PATCH_EMBED,
)
# PatchEmbed is a strided convolution and is treated as one everywhere
CONV_KINDS = frozenset({CONV2D, DWCONV2D, PATCH_EMBED})

PRECISION_BYTES = {"fp32": 4, "int8": 1}
GRAPH_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TensorSpec:
    dims: tuple
    layout: str
    element_bytes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        want = 3 if self.layout == TOKENS3D else 4
        if len(self.dims) != want:
            raise ValueError(f"{self.layout} tensor needs {want} dims, got {self.dims}")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"non-positive extent in {self.dims}")

    @property
    def numel(self) -> int:
        return math.prod(self.dims)

    @property
    def nbytes(self) -> int:
        return self.numel * self.element_bytes

    @property
    def channels(self) -> int:
        if self.layout == NCHW:
            return self.dims[1]
        return self.dims[-1]

    @property
    def spatial(self) -> tuple:
        """(H, W) for feature maps."""
        if self.layout == NCHW:
            return self.dims[2], self.dims[3]
        if self.layout == NHWC:
            return self.dims[1], self.dims[2]
        raise ValueError("token tensors have no spatial extent")

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "layout": self.layout, "element_bytes": self.element_bytes}

    @classmethod
    def from_dict(cls, d: dict) -> "TensorSpec":
        return cls(tuple(d["dims"]), d["layout"], d["element_bytes"])


def feature_map(channels: int, height: int, width: int, layout: str, element_bytes: int) -> TensorSpec:
    if layout == NCHW:
        return TensorSpec((1, channels, height, width), NCHW, element_bytes)
    return TensorSpec((1, height, width, channels), NHWC, element_bytes)


@dataclass(frozen=True)
class OpNode:
    id: int
    kind: str
    attrs: dict
    inputs: tuple
    output: TensorSpec
    block_index: int
    conv_layout_tag: Optional[str] = None
    # producer node ids, -1 for the model input
    sources: tuple = ()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "attrs": self.attrs,
            "inputs": [t.to_dict() for t in self.inputs],
            "output": self.output.to_dict(),
            "block_index": self.block_index,
            "conv_layout_tag": self.conv_layout_tag,
            "sources": list(self.sources),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OpNode":
        return cls(
            id=d["id"],
            kind=d["kind"],
            attrs=d["attrs"],
            inputs=tuple(TensorSpec.from_dict(t) for t in d["inputs"]),
            output=TensorSpec.from_dict(d["output"]),
            block_index=d["block_index"],
            conv_layout_tag=d.get("conv_layout_tag"),
            sources=tuple(d.get("sources", ())),
        )


@dataclass
class OpGraph:
    arch_id: str
    nodes: list = field(default_factory=list)
    total_params: int = 0
    weight_bytes: int = 0
    precision: str = "fp32"
    input: Optional[TensorSpec] = None

    def __len__(self):
        return len(self.nodes)

    def to_jsonl(self) -> str:
        header = {
            "record": "header",
            "format_version": GRAPH_FORMAT_VERSION,
            "arch_id": self.arch_id,
            "precision": self.precision,
            "total_params": self.total_params,
            "weight_bytes": self.weight_bytes,
            "input": self.input.to_dict() if self.input else None,
            "num_nodes": len(self.nodes),
        }
        lines = [json.dumps(header, sort_keys=True)]
        for node in self.nodes:
            lines.append(json.dumps({"record": "node", **node.to_dict()}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "OpGraph":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise SchemaError("empty graph document")
        header = json.loads(lines[0])
        if header.get("record") != "header":
            raise SchemaError("graph document must start with a header record")
        if header.get("format_version") != GRAPH_FORMAT_VERSION:
            raise SchemaError(f"unsupported graph format_version {header.get('format_version')}")
        nodes = []
        for ln in lines[1:]:
            d = json.loads(ln)
            if d.pop("record", None) != "node":
                raise SchemaError("expected node record")
            nodes.append(OpNode.from_dict(d))
        if len(nodes) != header["num_nodes"]:
            raise SchemaError(f"header announces {header['num_nodes']} nodes, found {len(nodes)}")
        inp = header.get("input")
        return cls(
            arch_id=header["arch_id"],
            nodes=nodes,
            total_params=header["total_params"],
            weight_bytes=header["weight_bytes"],
            precision=header["precision"],
            input=TensorSpec.from_dict(inp) if inp else None,
        )


def node_params(node: OpNode) -> int:
    return int(node.attrs.get("params", 0))


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


class _Builder:
    def __init__(self, arch_id: str, precision: str):
        self.arch_id = arch_id
        self.precision = precision
        self.eb = PRECISION_BYTES[precision]
        self.nodes = []
        self.block = 0

    def emit(self, kind, inputs, output, attrs=None, layout_tag=None):
        srcs = tuple(src for src, _ in inputs)
        node = OpNode(
            id=len(self.nodes),
            kind=kind,
            attrs=dict(attrs or {}),
            inputs=tuple(t for _, t in inputs),
            output=output,
            block_index=self.block,
            conv_layout_tag=layout_tag,
            sources=srcs,
        )
        self.nodes.append(node)
        return node.id, output

    # values are (producer_id, TensorSpec) pairs

    def conv(self, x, kind, c_out, kernel, stride, groups=1):
        src, t = x
        if t.layout == TOKENS3D:
            raise LoweringError(f"block {self.block}: convolution on token tensor")
        h, w = t.spatial
        c_in = t.channels
        h_out, w_out = _ceil_div(h, stride), _ceil_div(w, stride)
        out = feature_map(c_out, h_out, w_out, t.layout, self.eb)
        params = c_out * (c_in // groups) * kernel * kernel + c_out
        tag = CHANNEL_FIRST if t.layout == NCHW else CHANNEL_LAST
        attrs = {"kernel_size": kernel, "stride": stride, "groups": groups, "params": params}
        return self.emit(kind, [x], out, attrs, tag)

    def linear(self, x, d_out):
        src, t = x
        d_in = t.dims[-1]
        out = TensorSpec((t.dims[0], t.dims[1], d_out), TOKENS3D, self.eb)
        return self.emit(LINEAR, [x], out, {"params": d_in * d_out + d_out})

    def unary(self, kind, x, **attrs):
        return self.emit(kind, [x], x[1], attrs)

    def norm(self, kind, x):
        return self.emit(kind, [x], x[1], {"params": 2 * x[1].channels})

    def add(self, a, b):
        if a[1].dims != b[1].dims:
            raise LoweringError(f"block {self.block}: residual shape mismatch {a[1].dims} vs {b[1].dims}")
        return self.emit(ADD, [a, b], a[1])

    def to_tokens(self, x):
        src, t = x
        h, w = t.spatial
        out = TensorSpec((1, h * w, t.channels), TOKENS3D, self.eb)
        if t.layout == NCHW:
            return self.emit(TRANSPOSE, [x], out, {"perm": [0, 2, 1], "flatten": True})
        return self.emit(RESHAPE, [x], out)

    def to_spatial(self, x, grid):
        src, t = x
        h, w = grid
        if t.dims[1] != h * w:
            raise LoweringError(f"block {self.block}: {t.dims[1]} tokens do not fill a {h}x{w} grid")
        out = TensorSpec((1, h, w, t.dims[2]), NHWC, self.eb)
        return self.emit(RESHAPE, [x], out)

    def split_heads(self, x, heads, transpose_last=False):
        src, t = x
        n, d = t.dims[1], t.dims[2] // heads
        dims = (heads, d, n) if transpose_last else (heads, n, d)
        perm = [0, 2, 3, 1] if transpose_last else [0, 2, 1, 3]
        return self.emit(TRANSPOSE, [x], TensorSpec(dims, TOKENS3D, self.eb), {"perm": perm, "heads": heads})

    def merge_heads(self, x):
        src, t = x
        heads, n, d = t.dims
        out = TensorSpec((1, n, heads * d), TOKENS3D, self.eb)
        return self.emit(TRANSPOSE, [x], out, {"perm": [0, 2, 1, 3], "heads": heads})

    def matmul(self, a, b):
        ta, tb = a[1], b[1]
        if ta.dims[0] != tb.dims[0] or ta.dims[2] != tb.dims[1]:
            raise LoweringError(f"block {self.block}: matmul shape mismatch {ta.dims} x {tb.dims}")
        out = TensorSpec((ta.dims[0], ta.dims[1], tb.dims[2]), TOKENS3D, self.eb)
        return self.emit(MATMUL, [a, b], out)


def _attention(b: _Builder, x, block, grid):
    dim = block.embedding_dim
    heads = block.attention.num_heads
    sr = block.attention.sr_ratio
    y = b.norm(block.norm, x)
    q = b.linear(y, dim)
    kv = y
    if sr > 1:
        s = b.to_spatial(y, grid)
        s = b.conv(s, CONV2D, dim, kernel=sr, stride=sr)
        kv = b.to_tokens(s)
    k = b.linear(kv, dim)
    v = b.linear(kv, dim)
    qh = b.split_heads(q, heads)
    kt = b.split_heads(k, heads, transpose_last=True)
    vh = b.split_heads(v, heads)
    scores = b.matmul(qh, kt)
    scores = b.unary(SOFTMAX, scores, scale=1.0 / math.sqrt(dim // heads))
    o = b.matmul(scores, vh)
    o = b.merge_heads(o)
    return b.linear(o, dim)


def _mlp(b: _Builder, x, block):
    y = b.norm(block.norm, x)
    y = b.linear(y, block.mlp_ratio * block.embedding_dim)
    y = b.unary(block.activation, y)
    y = b.linear(y, block.embedding_dim)
    return b.add(x, y)


def lower(cfg: ArchConfig, precision: str = "fp32", *, check: bool = True) -> OpGraph:
    """Expand ``cfg`` into a topologically ordered operation graph.

    Norms are pre-norm. Every stage starts with a patch-embedding convolution
    (stride ``2**merge_k`` for the first stage, 2 afterwards, ceil semantics).
    ``check=False`` skips search-space validation so off-grid resolutions can
    be lowered for scaling studies.
    """
    if precision not in PRECISION_BYTES:
        raise LoweringError(f"unknown precision {precision!r}")
    if check:
        problems = validate_arch(cfg)
        if problems:
            raise LoweringError("invalid architecture: " + "; ".join(problems))
    b = _Builder(cfg.arch_id, precision)
    image = TensorSpec((1, 3, cfg.input_height, cfg.input_width), NCHW, b.eb)
    x = (-1, image)
    grid = (cfg.input_height, cfg.input_width)

    for j, block in enumerate(cfg.blocks):
        b.block = block.original_index
        patch = cfg.first_patch() if j == 0 else 2
        if x[1].layout == TOKENS3D:
            x = b.to_spatial(x, grid)
        x = b.conv(x, PATCH_EMBED, block.embedding_dim, kernel=patch, stride=patch)
        grid = x[1].spatial
        if min(grid) < 1:
            raise LoweringError(f"block {block.original_index}: spatial extent reached 0")

        if block.token_mixer == ATTENTION:
            x = b.to_tokens(x)
            x = b.add(x, _attention(b, x, block, grid))
        else:
            sc = block.sepconv
            hidden = sc.expansion_ratio * block.embedding_dim
            y = b.norm(block.norm, x)
            y = b.conv(y, CONV2D, hidden, kernel=1, stride=1)
            y = b.unary(block.activation, y)
            y = b.conv(y, DWCONV2D, hidden, kernel=sc.kernel_size, stride=1, groups=hidden)
            y = b.conv(y, CONV2D, block.embedding_dim, kernel=1, stride=1)
            x = b.add(x, y)
            x = b.to_tokens(x)
        x = _mlp(b, x, block)

    b.block = 0
    src, t = x
    pooled = TensorSpec((1, 1, t.dims[2]), TOKENS3D, b.eb)
    x = b.emit(POOL, [x], pooled, {"mode": "avg"})
    b.linear(x, cfg.num_classes)

    params = sum(node_params(n) for n in b.nodes)
    return OpGraph(
        arch_id=cfg.arch_id,
        nodes=b.nodes,
        total_params=params,
        weight_bytes=params * b.eb,
        precision=precision,
        input=image,
    )


def estimate_memory(graph: OpGraph) -> int:
    """Weights plus every intermediate output, in bytes (no buffer reuse)."""
    return graph.weight_bytes + sum(n.output.nbytes for n in graph.nodes)


def op_histogram(graph: OpGraph) -> dict:
    return dict(Counter(n.kind for n in graph.nodes))


def check_graph(graph: OpGraph) -> list:
    """Shape and layout soundness problems; empty for a well-formed graph."""
    problems = []
    produced = {-1: graph.input}
    for pos, node in enumerate(graph.nodes):
        if node.id != pos:
            problems.append(f"node at position {pos} has id {node.id}")
        if len(node.sources) != len(node.inputs):
            problems.append(f"node {node.id}: {len(node.sources)} sources for {len(node.inputs)} inputs")
        for src, spec in zip(node.sources, node.inputs):
            if src not in produced:
                problems.append(f"node {node.id}: source {src} not produced earlier")
            elif produced[src] is not None and produced[src] != spec:
                problems.append(f"node {node.id}: input {spec.dims} != producer {src} output {produced[src].dims}")
        is_conv = node.kind in CONV_KINDS
        if is_conv and any(t.layout == TOKENS3D for t in node.inputs):
            problems.append(f"node {node.id}: convolution on TOKENS3D input")
        if is_conv != (node.conv_layout_tag is not None):
            problems.append(f"node {node.id}: conv_layout_tag inconsistent with kind {node.kind}")
        ranks = {len(t.dims) for t in node.inputs} | {len(node.output.dims)}
        if len(ranks) > 1 and node.kind not in (RESHAPE, TRANSPOSE):
            problems.append(f"node {node.id}: {node.kind} changes rank without a reshape")
        produced[node.id] = node.output
    return problems
