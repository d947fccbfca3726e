"""Per-operation-kind latency predictors and predictor bundles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..datastore import Context, MeasurementSet
from ..errors import ConfigurationError, DataError, SchemaError, UnsupportedMethodError
from ..opfeatures import FeatureVector, columns_for, featurize
from ..opgraph import CONV_KINDS
from .ensembles import fit_boosting, fit_forest
from .lasso import fit_lasso, predict_lasso
from .tree import PackedForest, Tree

LASSO = "lasso"
RF = "rf"
GBDT = "gbdt"
METHODS = (LASSO, RF, GBDT)
OBJECTIVES = ("relative_l1", "log_l2")
BUNDLE_SCHEMA_VERSION = 1
# predictions are floored here so every op costs something
EPSILON_US = 1e-3


@dataclass(frozen=True)
class LassoParams:
    lam: float = 0.01
    max_iters: int = 1000
    tol: float = 1e-8


@dataclass(frozen=True)
class RFParams:
    n_trees: int = 200
    max_depth: Optional[int] = 12
    min_leaf: int = 1
    feature_subsample: float = 1.0
    bootstrap: bool = True


@dataclass(frozen=True)
class GBDTParams:
    n_trees: int = 300
    learning_rate: float = 0.1
    max_depth: Optional[int] = 6
    min_leaf: int = 5
    objective: str = "relative_l1"


@dataclass(frozen=True)
class Hyperparams:
    lasso: LassoParams = LassoParams()
    rf: RFParams = RFParams()
    gbdt: GBDTParams = GBDTParams()

    def __post_init__(self):
        for name, count in (("lasso.max_iters", self.lasso.max_iters), ("rf.n_trees", self.rf.n_trees),
                            ("rf.min_leaf", self.rf.min_leaf), ("gbdt.n_trees", self.gbdt.n_trees),
                            ("gbdt.min_leaf", self.gbdt.min_leaf)):
            if count < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {count}")
        if not 0 < self.gbdt.learning_rate <= 1:
            raise ConfigurationError(f"gbdt.learning_rate must be in (0, 1], got {self.gbdt.learning_rate}")
        if self.gbdt.objective not in OBJECTIVES:
            raise ConfigurationError(f"gbdt.objective must be one of {OBJECTIVES}")
        if not 0 < self.rf.feature_subsample <= 1:
            raise ConfigurationError("rf.feature_subsample must be in (0, 1]")
        if self.lasso.lam < 0:
            raise ConfigurationError("lasso.lam must be >= 0")

    def for_method(self, method: str):
        return {LASSO: self.lasso, RF: self.rf, GBDT: self.gbdt}[method]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(LassoParams(**d.get("lasso", {})), RFParams(**d.get("rf", {})), GBDTParams(**d.get("gbdt", {})))


def kind_key(kind: str, conv_layout_tag: Optional[str] = None, separate_conv_layouts: bool = True) -> str:
    """Predictor routing key; convolutions are split by input memory format."""
    if kind in CONV_KINDS and separate_conv_layouts and conv_layout_tag:
        return f"{kind}|{conv_layout_tag}"
    return kind


def _kind_of(key: str) -> str:
    return key.split("|", 1)[0]


@dataclass
class TrainedPredictor:
    kind_key: str
    method: str
    model: dict
    feature_schema: tuple
    training_meta: dict
    _packed: Optional[PackedForest] = field(default=None, init=False, repr=False, compare=False)

    def trees(self) -> list:
        return [Tree.from_dict(t) for t in self.model.get("trees", [])]

    def _forest(self) -> PackedForest:
        if self._packed is None:
            trees = self.trees()
            if self.method == RF:
                self._packed = PackedForest(trees, [1.0 / len(trees)] * len(trees))
            else:
                self._packed = PackedForest(trees, [self.model["learning_rate"]] * len(trees), self.model["base"])
        return self._packed

    def predict_array(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != len(self.feature_schema):
            raise SchemaError(f"{self.kind_key}: expected {len(self.feature_schema)} features, got {X.shape[1]}")
        if self.method == LASSO:
            out = predict_lasso(self.model, X)
        else:
            out = self._forest().predict(X)
            if self.method == GBDT and self.model["objective"] == "log_l2":
                out = np.exp(out)
        return np.maximum(out, EPSILON_US)

    def to_dict(self) -> dict:
        return {
            "kind_key": self.kind_key,
            "method": self.method,
            "feature_schema": list(self.feature_schema),
            "training_meta": self.training_meta,
            "model": self.model,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedPredictor":
        return cls(d["kind_key"], d["method"], d["model"], tuple(d["feature_schema"]), d["training_meta"])


def fit(method: str, X, y, hp: Hyperparams = Hyperparams(), seed: int = 0,
        kind_key: str = "", feature_schema: tuple = ()) -> TrainedPredictor:
    """Fit one predictor; deterministic in ``seed``."""
    if method not in METHODS:
        raise UnsupportedMethodError(f"unknown method {method!r}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise DataError(f"X has shape {X.shape} but y has {len(y)} entries")
    if len(y) < 2:
        raise DataError("need at least 2 samples")
    if not np.all(np.isfinite(y)) or np.any(y <= 0):
        raise DataError("latency targets must be finite and > 0")
    if not feature_schema:
        feature_schema = tuple(f"x{i}" for i in range(X.shape[1]))
    if len(feature_schema) != X.shape[1]:
        raise SchemaError("feature_schema length does not match X")
    params = hp.for_method(method)
    meta = {"n_samples": int(len(y)), "seed": int(seed), "hyperparameters": asdict(params)}
    if method == LASSO:
        model = fit_lasso(X, y, params.lam, params.max_iters, params.tol)
    elif method == RF:
        trees = fit_forest(X, y, params.n_trees, params.max_depth, params.min_leaf,
                           params.feature_subsample, params.bootstrap, seed)
        model = {"trees": [t.to_dict() for t in trees]}
    else:
        base, trees, history = fit_boosting(X, y, params.n_trees, params.learning_rate, params.max_depth,
                                            params.min_leaf, params.objective, seed)
        model = {"base": base, "learning_rate": params.learning_rate, "objective": params.objective,
                 "trees": [t.to_dict() for t in trees]}
        meta["train_mape_history"] = [100.0 * h for h in history]
    return TrainedPredictor(kind_key or "", method, model, tuple(feature_schema), meta)


def predict(p: TrainedPredictor, x: FeatureVector) -> float:
    """Latency in microseconds for one feature vector."""
    if tuple(x.names) != tuple(p.feature_schema):
        raise SchemaError(f"{p.kind_key}: feature names {x.names} do not match {p.feature_schema}")
    return float(p.predict_array(x.array()[None, :])[0])


def truncated(p: TrainedPredictor, n_stages: int) -> TrainedPredictor:
    """Boosted predictor keeping only its first ``n_stages`` trees."""
    if p.method != GBDT:
        raise UnsupportedMethodError("only boosted predictors have stages")
    model = dict(p.model, trees=p.model["trees"][:n_stages])
    return TrainedPredictor(p.kind_key, p.method, model, p.feature_schema, p.training_meta)


def mdi_importance(p: TrainedPredictor) -> dict:
    """Mean decrease of impurity per feature, normalised to sum to 1.

    Each tree's split gains are normalised within the tree, then averaged
    over the trees that split at all.
    """
    if p.method == LASSO:
        raise UnsupportedMethodError("MDI importance needs a tree ensemble, got lasso")
    n_feat = len(p.feature_schema)
    total = np.zeros(n_feat)
    n_used = 0
    for t in p.trees():
        imp = np.zeros(n_feat)
        split = t.feature >= 0
        np.add.at(imp, t.feature[split], t.gain[split])
        s = imp.sum()
        if s > 0:
            total += imp / s
            n_used += 1
    if n_used:
        total /= total.sum()
    return dict(zip(p.feature_schema, total.tolist()))


def graph_features(graph) -> list:
    return [featurize(n) for n in graph.nodes]


def collect_samples(graphs, ms: MeasurementSet, separate_conv_layouts: bool = True,
                    model_ids=None, features=None) -> dict:
    """Join measurements to graph nodes and group them by kind key.

    Returns ``{key: (X, y, refs)}`` with ``refs`` the ``(model_id, node_id)``
    pair of each row. ``features`` may carry precomputed
    ``{arch_id: [FeatureVector, ...]}``.
    """
    index = {g.arch_id: g for g in graphs}
    keep = None if model_ids is None else set(model_ids)
    rows = {}
    for r in ms.records:
        if keep is not None and r.model_id not in keep:
            continue
        g = index.get(r.model_id)
        if g is None:
            raise DataError(f"measurement for unknown model {r.model_id}")
        if not 0 <= r.node_id < len(g.nodes) or g.nodes[r.node_id].kind != r.op_kind:
            raise DataError(f"measurement {r.model_id}/{r.node_id} does not match a {r.op_kind} node")
        node = g.nodes[r.node_id]
        fv = features[r.model_id][r.node_id] if features is not None else featurize(node)
        key = kind_key(node.kind, node.conv_layout_tag, separate_conv_layouts)
        rows.setdefault(key, ([], [], []))
        xs, ys, refs = rows[key]
        xs.append(fv.values)
        ys.append(r.latency)
        refs.append((r.model_id, r.node_id))
    return {k: (np.asarray(xs, dtype=float), np.asarray(ys), refs) for k, (xs, ys, refs) in sorted(rows.items())}


@dataclass
class PredictorBundle:
    method: str
    seed: int
    hyperparams: Hyperparams
    predictors: dict
    context: Optional[Context] = None
    separate_conv_layouts: bool = True
    schema_version: int = BUNDLE_SCHEMA_VERSION

    def key_for(self, node) -> str:
        return kind_key(node.kind, node.conv_layout_tag, self.separate_conv_layouts)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "method": self.method,
            "seed": self.seed,
            "hyperparams": self.hyperparams.to_dict(),
            "context": self.context.to_dict() if self.context else None,
            "separate_conv_layouts": self.separate_conv_layouts,
            "predictors": {k: p.to_dict() for k, p in sorted(self.predictors.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorBundle":
        if d.get("schema_version") != BUNDLE_SCHEMA_VERSION:
            raise SchemaError(f"unsupported bundle schema_version {d.get('schema_version')}")
        predictors = {k: TrainedPredictor.from_dict(v) for k, v in d["predictors"].items()}
        for k, p in predictors.items():
            if tuple(p.feature_schema) != columns_for(_kind_of(k)):
                raise SchemaError(f"predictor {k}: feature schema {p.feature_schema} is not the {_kind_of(k)} schema")
        ctx = Context.from_dict(d["context"]) if d.get("context") else None
        return cls(d["method"], d["seed"], Hyperparams.from_dict(d["hyperparams"]), predictors, ctx,
                   d["separate_conv_layouts"])

    @classmethod
    def from_json(cls, text: str) -> "PredictorBundle":
        return cls.from_dict(json.loads(text))


def fit_bundle(graphs, ms: MeasurementSet, method: str, hp: Hyperparams = Hyperparams(), seed: int = 0,
               model_ids=None, separate_conv_layouts: bool = True, features=None) -> PredictorBundle:
    """Train one predictor per kind key from measurements of a single context."""
    contexts = ms.contexts()
    if len(contexts) > 1:
        raise DataError(f"measurements span {len(contexts)} contexts; train one bundle per context")
    samples = collect_samples(graphs, ms, separate_conv_layouts, model_ids, features)
    predictors = {}
    for i, (key, (X, y, _)) in enumerate(samples.items()):
        if len(y) < 2:
            continue
        predictors[key] = fit(method, X, y, hp, seed + i, key, columns_for(_kind_of(key)))
    return PredictorBundle(method, seed, hp, predictors, contexts[0] if contexts else None, separate_conv_layouts)
