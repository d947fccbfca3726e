"""End-to-end prediction by summation and the reports built on it."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .datastore import MeasurementSet, split
from .errors import ContextMismatchError, CoverageError, DataError
from .learners import GBDT, LASSO, RF, Hyperparams, PredictorBundle, fit_bundle, graph_features
from .opgraph import (
    ADD, BATCH_NORM, CONV_KINDS, GELU, LAYER_NORM, LINEAR, MATMUL, MUL, POOL, RELU, RESHAPE, SILU,
    TRANSPOSE, OpGraph,
)

CATEGORIES = ("conv", "linear", "matmul", "activation", "normalization", "element-wise",
              "pooling", "reshape/transpose", "other")
_CATEGORY = {
    LINEAR: "linear", MATMUL: "matmul", GELU: "activation", SILU: "activation", RELU: "activation",
    LAYER_NORM: "normalization", BATCH_NORM: "normalization", ADD: "element-wise", MUL: "element-wise",
    POOL: "pooling", RESHAPE: "reshape/transpose", TRANSPOSE: "reshape/transpose",
}


def op_category(kind: str) -> str:
    if kind in CONV_KINDS:
        return "conv"
    return _CATEGORY.get(kind, "other")


def mape(pairs) -> float:
    """Mean absolute percentage error of ``(measured, predicted)`` pairs."""
    arr = np.asarray(list(pairs), dtype=float)
    if arr.size == 0:
        raise ValueError("MAPE of an empty list")
    measured, predicted = arr[:, 0], arr[:, 1]
    if np.any(measured <= 0):
        raise ValueError("measured values must be > 0")
    return float(np.mean(np.abs(measured - predicted) / measured) * 100.0)


@dataclass
class PredictionReport:
    model_id: str
    context: Optional[dict]
    per_node: list
    end_to_end_predicted_us: float
    end_to_end_measured_us: Optional[float] = None
    # measured end-to-end was summed from per-op records
    measured_is_derived: bool = True
    breakdown: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "context": self.context,
            "end_to_end_predicted_us": self.end_to_end_predicted_us,
            "end_to_end_measured_us": self.end_to_end_measured_us,
            "measured_is_derived": self.measured_is_derived,
            "breakdown": {k: {"latency_share": a, "memory_share": b} for k, (a, b) in self.breakdown.items()},
            "per_node": [
                {"node_id": n, "predicted_us": p, "measured_us": m} for n, p, m in self.per_node
            ],
        }


def breakdown(graph: OpGraph, latencies) -> dict:
    """Category -> (latency share, memory share); each share column sums to 1."""
    lat = {c: 0.0 for c in CATEGORIES}
    mem = {c: 0.0 for c in CATEGORIES}
    for node, t in zip(graph.nodes, latencies):
        c = op_category(node.kind)
        lat[c] += t
        mem[c] += node.output.nbytes + node.attrs.get("params", 0) * node.output.element_bytes
    lt, mt = sum(lat.values()), sum(mem.values())
    return {c: (lat[c] / lt if lt else 0.0, mem[c] / mt if mt else 0.0) for c in CATEGORIES if lat[c] or mem[c]}


def _check_context(bundle: PredictorBundle, ctx, allow_mismatch: bool) -> None:
    if allow_mismatch or bundle.context is None or ctx is None:
        return
    if bundle.context != ctx:
        raise ContextMismatchError(
            f"bundle trained on {bundle.context.key()} but measurements are {ctx.key()}"
        )


def node_predictions(graph: OpGraph, bundle: PredictorBundle, default_cost: Optional[Callable] = None,
                     features=None) -> np.ndarray:
    features = features if features is not None else graph_features(graph)
    keys = [bundle.key_for(n) for n in graph.nodes]
    missing = {k for k in keys if k not in bundle.predictors}
    if missing and default_cost is None:
        raise CoverageError(missing)
    out = np.zeros(len(graph.nodes))
    groups = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    for k, idx in groups.items():
        if k in bundle.predictors:
            X = np.asarray([features[i].values for i in idx])
            out[idx] = bundle.predictors[k].predict_array(X)
        else:
            for i in idx:
                out[i] = float(default_cost(graph.nodes[i], features[i]))
    return out


def predict_model(graph: OpGraph, bundle: PredictorBundle, default_cost: Optional[Callable] = None,
                  measured: Optional[dict] = None, context=None, allow_context_mismatch: bool = False,
                  features=None) -> PredictionReport:
    """Predict every node and sum them.

    ``measured`` maps node id to measured microseconds; when given, the
    report carries the derived measured end-to-end latency and the breakdown
    is computed from measurements rather than predictions.
    """
    _check_context(bundle, context, allow_context_mismatch)
    preds = node_predictions(graph, bundle, default_cost, features)
    per_node = []
    for node, p in zip(graph.nodes, preds):
        per_node.append((node.id, float(p), None if measured is None else measured.get(node.id)))
    e2e_pred = float(sum(p for _, p, _ in per_node))
    e2e_meas = None
    shares = preds
    if measured:
        if len(measured) != len(graph.nodes):
            raise DataError(f"{graph.arch_id}: {len(measured)} measured ops for {len(graph.nodes)} nodes")
        shares = [measured[n.id] for n in graph.nodes]
        e2e_meas = float(sum(shares))
    ctx = context.to_dict() if context is not None else (bundle.context.to_dict() if bundle.context else None)
    return PredictionReport(graph.arch_id, ctx, per_node, e2e_pred, e2e_meas, True, breakdown(graph, shares))


@dataclass
class EvaluationResult:
    method: str
    end_to_end_mape: float
    op_mape: dict
    reports: list

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "end_to_end_mape": self.end_to_end_mape,
            "op_mape": self.op_mape,
            "models": [
                {"model_id": r.model_id, "end_to_end_measured_us": r.end_to_end_measured_us,
                 "end_to_end_predicted_us": r.end_to_end_predicted_us}
                for r in self.reports
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("model_id", "end_to_end_measured_us", "end_to_end_predicted_us"))
        for r in self.reports:
            w.writerow((r.model_id, repr(r.end_to_end_measured_us), repr(r.end_to_end_predicted_us)))
        return buf.getvalue()


def evaluate(graphs, ms: MeasurementSet, bundle: PredictorBundle, model_ids=None,
             allow_context_mismatch: bool = False, features=None) -> EvaluationResult:
    """End-to-end and per-category operation MAPE over ``model_ids``."""
    contexts = ms.contexts()
    if len(contexts) > 1:
        raise DataError("evaluate one context at a time")
    ctx = contexts[0] if contexts else None
    by_model = ms.by_model()
    index = {g.arch_id: g for g in graphs}
    ids = sorted(by_model) if model_ids is None else sorted(model_ids)
    reports = []
    op_pairs = {}
    for mid in ids:
        if mid not in index:
            raise DataError(f"no graph for model {mid}")
        g = index[mid]
        measured = {r.node_id: r.latency for r in by_model.get(mid, [])}
        rep = predict_model(g, bundle, measured=measured, context=ctx,
                            allow_context_mismatch=allow_context_mismatch,
                            features=None if features is None else features[mid])
        reports.append(rep)
        for node, (_, p, m) in zip(g.nodes, rep.per_node):
            op_pairs.setdefault(op_category(node.kind), []).append((m, p))
    e2e = mape([(r.end_to_end_measured_us, r.end_to_end_predicted_us) for r in reports])
    return EvaluationResult(bundle.method, e2e, {c: mape(v) for c, v in sorted(op_pairs.items())}, reports)


@dataclass
class SpeedupResult:
    ratios: dict
    bins: np.ndarray
    counts: np.ndarray
    unmatched: list

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("bin_start", "bin_end", "count"))
        for a, b, c in zip(self.bins[:-1], self.bins[1:], self.counts):
            w.writerow((repr(float(a)), repr(float(b)), int(c)))
        return buf.getvalue()


def model_latencies(ms: MeasurementSet) -> dict:
    """End-to-end latency per model, summed over its op records."""
    out = {}
    for r in ms.records:
        out[r.model_id] = out.get(r.model_id, 0.0) + r.latency
    return out


def speedup_analysis(a: MeasurementSet, b: MeasurementSet, bins=20, range=None) -> SpeedupResult:
    """Per-model ratio latency_a / latency_b and its histogram.

    ``bins``/``range`` follow :func:`numpy.histogram`. Models present in
    only one set are reported in ``unmatched``.
    """
    la, lb = model_latencies(a), model_latencies(b)
    common = sorted(set(la) & set(lb))
    unmatched = sorted(set(la) ^ set(lb))
    ratios = {m: la[m] / lb[m] for m in common}
    vals = np.asarray(list(ratios.values()))
    if range is None and len(vals) and vals.min() == vals.max():
        range = (vals.min() - 0.5, vals.max() + 0.5)
    counts, edges = np.histogram(vals, bins=bins, range=range)
    return SpeedupResult(ratios, edges, counts, unmatched)


@dataclass
class SweepResult:
    sizes: tuple
    runs: int
    # method -> size -> list of end-to-end MAPEs, one per run
    values: dict

    def mean(self, method, size) -> float:
        return float(np.mean(self.values[method][size]))

    def std(self, method, size) -> float:
        return float(np.std(self.values[method][size]))

    def table(self) -> dict:
        return {m: {s: self.mean(m, s) for s in self.sizes} for m in self.values}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("method",) + tuple(f"mape_{s}" for s in self.sizes) + tuple(f"std_{s}" for s in self.sizes))
        for m in self.values:
            w.writerow((m,) + tuple(repr(self.mean(m, s)) for s in self.sizes)
                       + tuple(repr(self.std(m, s)) for s in self.sizes))
        return buf.getvalue()


def training_size_sweep(graphs, ms: MeasurementSet, sizes, runs: int = 5, methods=(LASSO, RF, GBDT),
                        test_ids=None, hp: Hyperparams = Hyperparams(), seed: int = 0,
                        n_test: int = 100) -> SweepResult:
    """End-to-end test MAPE by method and training-set size.

    The test models are fixed; each run draws its training subset from the
    remaining pool with seed ``seed + run``.
    """
    ids = ms.model_ids()
    if test_ids is None:
        test_ids = split(ids, len(ids) - n_test, seed).test_ids
    test = set(test_ids)
    pool = [m for m in ids if m not in test]
    for s in sizes:
        if s > len(pool) or s < 1:
            raise DataError(f"training size {s} exceeds the pool of {len(pool)} models")
    index = {g.arch_id: g for g in graphs}
    features = {m: graph_features(index[m]) for m in ids}
    values = {m: {s: [] for s in sizes} for m in methods}
    for run in range(runs):
        rng = np.random.default_rng(seed + run)
        order = [pool[i] for i in rng.permutation(len(pool))]
        for s in sizes:
            train = order[:s]
            for m in methods:
                bundle = fit_bundle(graphs, ms, m, hp, seed + run, model_ids=train, features=features)
                res = evaluate(graphs, ms, bundle, model_ids=sorted(test), features=features)
                values[m][s].append(res.end_to_end_mape)
    return SweepResult(tuple(sizes), runs, values)
