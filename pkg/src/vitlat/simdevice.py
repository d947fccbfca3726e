"""Synthetic device: roofline latencies with optional mobile-CPU quirks.

The device stands in for on-device profiling so the train/predict pipeline
can be exercised end to end. Three optional modes reproduce effects seen on
real phones:

``FormatPenalty``
    channel-first convolutions pay an extra layout-conversion cost.
``DWConvSpikes``
    depthwise convolutions slow down when the channel count is a multiple of 32.
``ValueDependentGELU``
    GELU cost depends on the typical magnitude of its inputs, which no
    shape feature can see.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .datastore import Context, MeasurementRecord, MeasurementSet, format_latency
from .errors import ConfigurationError
from .opfeatures import FeatureVector, featurize, flops, traffic_bytes
from .opgraph import CHANNEL_FIRST, CONV_KINDS, DWCONV2D, GELU, OpGraph, OpNode

FORMAT_PENALTY = "FormatPenalty"
DWCONV_SPIKES = "DWConvSpikes"
VALUE_DEPENDENT_GELU = "ValueDependentGELU"
MODES = (FORMAT_PENALTY, DWCONV_SPIKES, VALUE_DEPENDENT_GELU)

# |x| region boundaries where libm switches erf approximations
GELU_BREAKPOINTS = (1.19, 1.77, 4.04, 5.66)
GELU_FACTORS = (1.0, 1.6, 2.85, 2.2, 1.3)


@dataclass(frozen=True)
class DeviceModel:
    name: str = "sim-cpu"
    peak_macs_per_us: float = 2.0e4
    bytes_per_us: float = 2.0e3
    per_op_overhead_us: float = 1.0
    modes: frozenset = frozenset()
    rng_noise_pct: float = 0.0
    format_penalty: float = 1.1
    spike_sigma: float = 1.0
    spike_multiple: int = 32
    gelu_breakpoints: tuple = GELU_BREAKPOINTS
    gelu_factors: tuple = GELU_FACTORS
    framework: str = "torch_mobile"
    core_config: str = "1xbig"
    target: str = "cpu"

    def __post_init__(self):
        object.__setattr__(self, "modes", frozenset(self.modes))
        object.__setattr__(self, "gelu_breakpoints", tuple(self.gelu_breakpoints))
        object.__setattr__(self, "gelu_factors", tuple(self.gelu_factors))
        if self.peak_macs_per_us <= 0 or self.bytes_per_us <= 0:
            raise ConfigurationError("peak rates must be positive")
        if not 0 <= self.rng_noise_pct < 50:
            raise ConfigurationError(f"rng_noise_pct must be in [0, 50), got {self.rng_noise_pct}")
        unknown = self.modes - set(MODES)
        if unknown:
            raise ConfigurationError(f"unknown modes {sorted(unknown)}")
        if len(self.gelu_factors) != len(self.gelu_breakpoints) + 1:
            raise ConfigurationError("need one GELU factor per |x| region")
        if self.per_op_overhead_us < 0 or self.format_penalty < 0 or self.spike_sigma < 0:
            raise ConfigurationError("overhead, penalty and spike must be non-negative")

    def with_modes(self, *modes) -> "DeviceModel":
        return replace(self, modes=frozenset(modes))

    def context(self, precision: str = "fp32") -> Context:
        return Context(self.name, self.framework, self.core_config, precision, self.target)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modes"] = sorted(self.modes)
        d["gelu_breakpoints"] = list(self.gelu_breakpoints)
        d["gelu_factors"] = list(self.gelu_factors)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceModel":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "DeviceModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def gelu_factor(dev: DeviceModel, value_scale: float) -> float:
    region = int(np.searchsorted(dev.gelu_breakpoints, abs(value_scale), side="right"))
    return dev.gelu_factors[region]


def _traffic(fv: FeatureVector) -> float:
    d = fv.as_dict()
    return d["in_bytes"] + d["out_bytes"] + d.get("weight_bytes", 0.0)


def roofline_us(dev: DeviceModel, macs: float, traffic: float) -> float:
    return max(macs / dev.peak_macs_per_us, traffic / dev.bytes_per_us) + dev.per_op_overhead_us


def op_latency(
    node: OpNode,
    fv: Optional[FeatureVector],
    dev: DeviceModel,
    value_scale: float = 1.0,
    noise: float = 0.0,
) -> float:
    """Latency in microseconds.

    ``noise`` is a pre-drawn relative perturbation in ``[-1, 1]`` scaled by
    ``dev.rng_noise_pct``; passing it in keeps this function pure.
    """
    if fv is None:
        fv = featurize(node)
    d = fv.as_dict()
    lat = roofline_us(dev, d["flops"], _traffic(fv))
    if node.kind in CONV_KINDS and FORMAT_PENALTY in dev.modes and node.conv_layout_tag == CHANNEL_FIRST:
        lat += dev.format_penalty * (d["in_bytes"] + d["out_bytes"]) / dev.bytes_per_us
    if node.kind == DWCONV2D and DWCONV_SPIKES in dev.modes and int(d["C_in"]) % dev.spike_multiple == 0:
        lat *= 1.0 + dev.spike_sigma
    if node.kind == GELU and VALUE_DEPENDENT_GELU in dev.modes:
        lat *= gelu_factor(dev, value_scale)
    return lat * (1.0 + noise * dev.rng_noise_pct / 100.0)


def graph_seed(seed: int, arch_id: str) -> np.random.SeedSequence:
    """Per-graph seed, independent of graph order in the input list."""
    h = int.from_bytes(hashlib.sha256(arch_id.encode()).digest()[:8], "little")
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, h])


def simulate_graph(
    graph: OpGraph,
    dev: DeviceModel,
    seed: int,
    value_scale: float = 1.0,
    value_scale_range: Optional[tuple] = None,
) -> list:
    rng = np.random.default_rng(graph_seed(seed, graph.arch_id))
    if value_scale_range is not None:
        value_scale = float(rng.uniform(*value_scale_range))
    noise = rng.uniform(-1.0, 1.0, size=len(graph.nodes))
    ctx = dev.context(graph.precision)
    out = []
    for node, eps in zip(graph.nodes, noise):
        fv = featurize(node)
        lat = op_latency(node, fv, dev, value_scale, float(eps))
        out.append(
            MeasurementRecord(
                model_id=graph.arch_id,
                node_id=node.id,
                op_kind=node.kind,
                context=ctx,
                latency_us=format_latency(lat),
                flop_count=flops(node),
                traffic_bytes=traffic_bytes(node),
            )
        )
    return out


def generate_measurements(
    graphs,
    dev: DeviceModel,
    seed: int,
    value_scale: float = 1.0,
    value_scale_range: Optional[tuple] = None,
) -> MeasurementSet:
    """One record per node per graph, deterministic in ``seed``.

    ``value_scale_range`` draws a per-model typical GELU input magnitude,
    emulating differing image and weight statistics between models.
    """
    records = []
    for g in graphs:
        records.extend(simulate_graph(g, dev, seed, value_scale, value_scale_range))
    return MeasurementSet(records)
