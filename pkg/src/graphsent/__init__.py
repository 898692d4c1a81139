"""Semi-supervised graph-sentiment analysis toolkit.

Trains a multi-head graph-attention classifier on message reply graphs,
stacks it with precomputed transformer sentiment scores through calibrated
logistic stacking, and runs mixed-effects logistic inference on the
resulting labels.
"""

from .calibrate import (CutoffResult, MetaModel, PredictionRecord, StackedClassifier,
                        fit_meta, optimal_cutoff, predict_meta, rescale, stack_labels)
from .corpus import (Message, School, SentimentLabel, SplitSpec, Splits, collapse_scores,
                     load_edges, load_embeddings, load_messages, load_scores,
                     make_splits, write_embeddings)
from .errors import ComputationError, GraphsentError, InputError, SeparationError
from .gat import (GatClassifier, GatConfig, GatParams, attention_logit,
                  cross_validate_lambda, forward, gradients, normalize_attention,
                  predict, train)
from .glmm import (FactorEffect, GlmmFit, GlmmRow, fit_glmm, marginal_loglik,
                   odds_ratios, sufficient_stats)
from .graph import Graph, build_graph, degree_histogram
from .metrics import (AgreementResult, ConfusionMatrix, MetricSuite,
                      agreement_and_kappa, confusion, metric_suite)

__version__ = "0.1.0"

__all__ = [
    "AgreementResult", "ComputationError", "ConfusionMatrix", "CutoffResult",
    "FactorEffect", "GatClassifier", "GatConfig", "GatParams", "GlmmFit", "GlmmRow",
    "Graph", "GraphsentError", "InputError", "Message", "MetaModel", "MetricSuite",
    "PredictionRecord", "School", "SentimentLabel", "SeparationError", "SplitSpec",
    "Splits", "StackedClassifier", "agreement_and_kappa", "attention_logit",
    "build_graph", "collapse_scores", "confusion", "cross_validate_lambda",
    "degree_histogram", "fit_glmm", "fit_meta", "forward", "gradients",
    "load_edges", "load_embeddings", "load_messages", "load_scores", "make_splits",
    "marginal_loglik", "metric_suite", "normalize_attention", "odds_ratios",
    "optimal_cutoff", "predict", "predict_meta", "rescale", "stack_labels",
    "sufficient_stats", "train", "write_embeddings",
]
