"""Latency effects the op features cannot see, on the simulated device.

Channel-first convolutions pay a layout conversion, depthwise convs spike on
channel counts that are multiples of 32, and GELU cost depends on the input
values rather than the shape.
"""
from vitlat.archspace import sample_arch
from vitlat.evaluation import speedup_analysis
from vitlat.opgraph import CHANNEL_FIRST, CONV_KINDS, GELU, lower
from vitlat.simdevice import (
    DWCONV_SPIKES, FORMAT_PENALTY, VALUE_DEPENDENT_GELU, DeviceModel, generate_measurements, op_latency,
)

graphs = [lower(sample_arch(s)) for s in range(60)]
base = DeviceModel()

fmt = base.with_modes(FORMAT_PENALTY)
ratios = [op_latency(n, None, fmt) / op_latency(n, None, base)
          for g in graphs for n in g.nodes if n.kind in CONV_KINDS and n.conv_layout_tag == CHANNEL_FIRST]
print(f"channel-first convs: {len(ratios)} ops, mean slowdown x{sum(ratios) / len(ratios):.2f}")

spikes = base.with_modes(DWCONV_SPIKES)
dw = [n for g in graphs for n in g.nodes if n.kind == "DWConv2d"]
for label, hit in (("multiple of 32", True), ("other", False)):
    node = next(n for n in dw if (n.output.channels % spikes.spike_multiple == 0) == hit)
    print(f"DWConv, {node.output.channels} channels ({label}): "
          f"x{op_latency(node, None, spikes) / op_latency(node, None, base):.2f}")

gelu = base.with_modes(VALUE_DEPENDENT_GELU)
node = next(n for g in graphs for n in g.nodes if n.kind == GELU)
for v in (0.5, 1.5, 2.0, 5.0, 8.0):
    print(f"GELU at input scale {v}: x{op_latency(node, None, gelu, value_scale=v) / op_latency(node, None, base):.2f}")

# Doubling memory bandwidth helps memory-bound models most.
slow = generate_measurements(graphs, base, seed=0)
fast = generate_measurements(graphs, DeviceModel(bytes_per_us=2 * base.bytes_per_us), seed=0)
res = speedup_analysis(slow, fast, bins=5, range=(1.0, 2.0))
print("\nspeedup from 2x bandwidth")
print(res.histogram_csv())
