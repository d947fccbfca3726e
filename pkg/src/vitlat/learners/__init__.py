"""Lasso, random forest and gradient boosted tree latency predictors."""

from .predictor import (
    EPSILON_US, GBDT, LASSO, METHODS, RF, GBDTParams, Hyperparams, LassoParams, PredictorBundle,
    RFParams, TrainedPredictor, collect_samples, fit, fit_bundle, graph_features, kind_key,
    mdi_importance, predict, truncated,
)

__all__ = [
    "EPSILON_US", "GBDT", "LASSO", "METHODS", "RF", "GBDTParams", "Hyperparams", "LassoParams",
    "PredictorBundle", "RFParams", "TrainedPredictor", "collect_samples", "fit", "fit_bundle",
    "graph_features", "kind_key", "mdi_importance", "predict", "truncated",
]
