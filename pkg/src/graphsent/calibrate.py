"""Cutoff optimization, probability rescaling, and logistic model stacking.

Probabilities are always the non-negative class probability; a message is
labeled non-negative when its probability reaches the cutoff (p >= c).
Cutoff search maximizes the geometric mean of sensitivity and positive
predictive value with the negative-sentiment class as positive, matching
the metrics-module convention.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .corpus import SentimentLabel
from .errors import ComputationError, InputError, SeparationError
from .validation import as_float_array, check_binary_labels, check_consistent_length

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
DIVERGENCE_BOUND = 30.0


@dataclass(frozen=True)
class CutoffResult:
    cutoff: float
    score: float
    degenerate: bool = False


def _gmean_at_cutoff(p, y, c):
    """sqrt(sensitivity * PPV) for the negative class at threshold c."""
    pred_neg = p < c
    actual_neg = y == 0
    tp = int(np.sum(pred_neg & actual_neg))
    fp = int(np.sum(pred_neg & ~actual_neg))
    fn = int(np.sum(~pred_neg & actual_neg))
    sensitivity = tp / (tp + fn) if tp + fn else 0.0
    ppv = tp / (tp + fp) if tp + fp else 0.0
    return float(np.sqrt(sensitivity * ppv))


def optimal_cutoff(p, y):
    """Sweep candidate thresholds and return the geometric-mean maximizer.

    Candidates are the distinct observed probabilities plus the midpoints of
    adjacent pairs; ties break toward the smallest cutoff.  Requires both
    classes present.
    """
    p = as_float_array(p, "p", ndim=1)
    y = check_binary_labels(y)
    check_consistent_length(p, y)
    if len(set(np.unique(y))) < 2:
        raise InputError("optimal_cutoff needs both classes present")
    distinct = np.unique(p)
    if distinct.size == 1:
        c = float(distinct[0])
        return CutoffResult(c, _gmean_at_cutoff(p, y, c), degenerate=True)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    candidates = np.unique(np.concatenate([distinct, mids]))
    best_c, best_score = None, -1.0
    for c in candidates:
        score = _gmean_at_cutoff(p, y, c)
        if score > best_score + 1e-15:
            best_c, best_score = float(c), score
    return CutoffResult(best_c, best_score)


def rescale(p, c):
    """Affine rescaling sending the cutoff c to 0.5 and 1 to 1 (unclamped)."""
    if not 0.0 < c < 1.0:
        raise InputError(f"cutoff must lie in (0, 1), got {c}")
    return 0.5 * (np.asarray(p, dtype=np.float64) - c) / (1.0 - c) + 0.5


def _sigmoid(eta):
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ex = np.exp(eta[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _binomial_loglik(X, k, n, beta):
    eta = X @ beta
    # k*eta - n*log(1+e^eta), computed stably
    return float(np.sum(k * eta - n * np.logaddexp(0.0, eta)))


def logistic_irls(X, k, n=None, tol=IRLS_TOL, max_iter=IRLS_MAX_ITER,
                  divergence_bound=DIVERGENCE_BOUND):
    """Maximum-likelihood logistic regression by Newton-Raphson/IRLS.

    Accepts binomial rows (``k`` successes of ``n`` trials); ``n=None``
    means Bernoulli.  Newton steps are halved whenever they would decrease
    the log-likelihood, so the returned ``loglik_trace`` is non-decreasing.
    Raises SeparationError when the coefficients diverge monotonically past
    ``divergence_bound`` and ComputationError on a singular information
    matrix.  Returns ``(beta, cov, converged, iterations, loglik_trace)``.
    """
    X = as_float_array(X, "X", ndim=2)
    k = as_float_array(k, "k", ndim=1)
    n = np.ones_like(k) if n is None else as_float_array(n, "n", ndim=1)
    check_consistent_length(X, k, n)

    beta = np.zeros(X.shape[1])
    loglik = _binomial_loglik(X, k, n, beta)
    trace = [loglik]
    converged = False
    iterations = 0
    growth = 0
    for iterations in range(1, max_iter + 1):
        p = _sigmoid(X @ beta)
        score = X.T @ (k - n * p)
        if np.max(np.abs(score)) < tol:
            converged = True
            iterations -= 1
            break
        w = n * p * (1.0 - p)
        info = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise ComputationError("singular information matrix") from None
        # step-halving keeps the log-likelihood monotone
        scale = 1.0
        for _ in range(30):
            candidate = beta + scale * step
            cand_ll = _binomial_loglik(X, k, n, candidate)
            if cand_ll >= loglik - 1e-12:
                break
            scale *= 0.5
        new_norm, old_norm = np.max(np.abs(candidate)), np.max(np.abs(beta))
        growth = growth + 1 if new_norm > old_norm else 0
        beta, loglik = candidate, cand_ll
        trace.append(loglik)
        if new_norm > divergence_bound and growth >= 3:
            raise SeparationError(
                f"complete separation: coefficients diverged past {divergence_bound}"
            )
    p = _sigmoid(X @ beta)
    w = n * p * (1.0 - p)
    info = X.T @ (X * w[:, None])
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise ComputationError("singular information matrix") from None
    return beta, cov, converged, iterations, trace


@dataclass(frozen=True)
class MetaModel:
    """Fitted logistic meta-model over the two rescaled base probabilities."""

    beta0: float
    beta1: float
    beta2: float
    converged: bool
    iterations: int
    se: tuple = (float("nan"),) * 3
    loglik: float = float("nan")

    @property
    def coef(self):
        return np.array([self.beta0, self.beta1, self.beta2])


def fit_meta(p1, p2, y):
    """Fit the stacking meta-model: logistic regression of y on (1, p1, p2)."""
    p1 = as_float_array(p1, "p1", ndim=1)
    p2 = as_float_array(p2, "p2", ndim=1)
    y = check_binary_labels(y)
    check_consistent_length(p1, p2, y)
    if len(set(np.unique(y))) < 2:
        raise InputError("fit_meta needs both classes present")
    X = np.column_stack([np.ones_like(p1), p1, p2])
    beta, cov, converged, iterations, trace = logistic_irls(X, y.astype(np.float64))
    return MetaModel(
        beta0=float(beta[0]), beta1=float(beta[1]), beta2=float(beta[2]),
        converged=converged, iterations=iterations,
        se=tuple(np.sqrt(np.diag(cov)).tolist()), loglik=trace[-1],
    )


def predict_meta(model, p1, p2):
    """Stacked non-negative probability, always inside (0, 1)."""
    if not model.converged:
        raise ComputationError("meta-model did not converge; refusing to predict")
    scalar = np.ndim(p1) == 0 and np.ndim(p2) == 0
    eta = np.atleast_1d(model.beta0 + model.beta1 * np.asarray(p1, dtype=np.float64)
                        + model.beta2 * np.asarray(p2, dtype=np.float64))
    out = _sigmoid(eta)
    return float(out[0]) if scalar else out


@dataclass
class PredictionRecord:
    """One message's path through the stack; column order of predictions.csv."""

    node_id: int
    p_raw_1: float
    p_raw_2: float
    p_scaled_1: float
    p_scaled_2: float
    p_bar: float
    label: SentimentLabel | None = None


def stack_labels(records):
    """Final decision: non-negative iff the stacked probability reaches 0.5."""
    for rec in records:
        rec.label = (SentimentLabel.NON_NEGATIVE if rec.p_bar >= 0.5
                     else SentimentLabel.NEGATIVE)
    return records


PREDICTION_COLUMNS = ("node_id", "p_raw_1", "p_raw_2", "p_scaled_1",
                      "p_scaled_2", "p_bar", "label")


def write_predictions(path, records, seed=None):
    """Predictions CSV; an optional leading ``# seed=`` line records provenance."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        if seed is not None:
            fh.write(f"# seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_COLUMNS)
        for rec in records:
            writer.writerow([
                rec.node_id, repr(rec.p_raw_1), repr(rec.p_raw_2),
                repr(rec.p_scaled_1), repr(rec.p_scaled_2), repr(rec.p_bar),
                rec.label.value if rec.label is not None else "",
            ])


def read_predictions(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"predictions file not found: {path}")
    records = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        lines = (line for line in fh if not line.startswith("#"))
        reader = csv.DictReader(lines)
        if reader.fieldnames is None or tuple(reader.fieldnames) != PREDICTION_COLUMNS:
            raise InputError(f"{path}: expected columns {PREDICTION_COLUMNS}")
        for line_no, rec in enumerate(reader, start=2):
            try:
                records.append(PredictionRecord(
                    node_id=int(rec["node_id"]),
                    p_raw_1=float(rec["p_raw_1"]),
                    p_raw_2=float(rec["p_raw_2"]),
                    p_scaled_1=float(rec["p_scaled_1"]),
                    p_scaled_2=float(rec["p_scaled_2"]),
                    p_bar=float(rec["p_bar"]),
                    label=SentimentLabel.from_token(rec["label"]) if rec["label"] else None,
                ))
            except ValueError:
                raise InputError(f"{path} line {line_no}: malformed field") from None
    return records


def write_meta_model(path, model, cutoff_1, cutoff_2, seed=None):
    """Key-value text persistence for the fitted meta-model and cutoffs."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"beta0 = {model.beta0!r}\n")
        fh.write(f"beta1 = {model.beta1!r}\n")
        fh.write(f"beta2 = {model.beta2!r}\n")
        fh.write(f"cutoff_1 = {cutoff_1!r}\n")
        fh.write(f"cutoff_2 = {cutoff_2!r}\n")
        fh.write(f"iterations = {model.iterations}\n")
        if seed is not None:
            fh.write(f"seed = {seed}\n")


def read_meta_model(path):
    """Load (MetaModel, cutoff_1, cutoff_2) written by `write_meta_model`."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"meta-model file not found: {path}")
    values = {}
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
    try:
        model = MetaModel(
            beta0=float(values["beta0"]), beta1=float(values["beta1"]),
            beta2=float(values["beta2"]), converged=True,
            iterations=int(values.get("iterations", 0)),
        )
        return model, float(values["cutoff_1"]), float(values["cutoff_2"])
    except (KeyError, ValueError) as exc:
        raise InputError(f"{path}: malformed meta-model file ({exc})") from None


class StackedClassifier(BaseEstimator):
    """Cutoff calibration + logistic stacking behind a fit/predict API.

    ``X`` is an (n, 2) array of raw non-negative probabilities, column 0 from
    the baseline scorer and column 1 from the graph classifier; ``y`` uses
    1 = non-negative, 0 = negative.
    """

    def __init__(self):
        pass

    def fit(self, X, y):
        X = as_float_array(X, "X", ndim=2)
        if X.shape[1] != 2:
            raise InputError("StackedClassifier expects exactly two probability columns")
        y = check_binary_labels(y)
        check_consistent_length(X, y)
        self.cutoff_1_ = optimal_cutoff(X[:, 0], y).cutoff
        self.cutoff_2_ = optimal_cutoff(X[:, 1], y).cutoff
        s1 = rescale(X[:, 0], self.cutoff_1_)
        s2 = rescale(X[:, 1], self.cutoff_2_)
        self.meta_ = fit_meta(s1, s2, y)
        return self

    def _check_fitted(self):
        if not hasattr(self, "meta_"):
            raise InputError("StackedClassifier is not fitted")

    def decision_records(self, node_ids, X):
        """Full per-node calibration trail as labeled PredictionRecords."""
        self._check_fitted()
        X = as_float_array(X, "X", ndim=2)
        s1 = rescale(X[:, 0], self.cutoff_1_)
        s2 = rescale(X[:, 1], self.cutoff_2_)
        p_bar = predict_meta(self.meta_, s1, s2)
        records = [
            PredictionRecord(int(node), float(x1), float(x2),
                             float(a), float(b), float(pb))
            for node, x1, x2, a, b, pb in zip(node_ids, X[:, 0], X[:, 1], s1, s2, p_bar)
        ]
        return stack_labels(records)

    def predict_proba(self, X):
        self._check_fitted()
        X = as_float_array(X, "X", ndim=2)
        p = predict_meta(self.meta_, rescale(X[:, 0], self.cutoff_1_),
                         rescale(X[:, 1], self.cutoff_2_))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)
