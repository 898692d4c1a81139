"""Multi-head graph-attention sentiment classifier.

Forward pass: per head k, edge importances
``e_ij = LeakyReLU(a_k . [M_k h_i || M_k h_j])`` are softmax-normalized over
each neighborhood, the attention-weighted neighbor averages are passed
through the head activation and concatenated, and a 2-logit affine head
yields the non-negative class probability.  The loss is class-weighted
cross-entropy over the labeled nodes plus an l2 penalty on all parameters;
gradients are exact analytic reverse-mode, and training is full-batch Adam.
"""

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ComputationError, InputError
from .validation import check_binary_labels, check_embeddings

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PROB_EPS = 1e-12

CHECKPOINT_MAGIC = b"GSCK"

_ACTIVATIONS = ("elu", "identity")


@dataclass(frozen=True)
class GatConfig:
    d_in: int
    heads: int = 4
    d_head: int | None = None
    leaky_slope: float = 0.2
    class_weight: float = 2.0
    l2_penalty: float = 0.08
    learning_rate: float = 0.02
    epochs: int = 200
    seed: int = 0
    activation: str = "elu"

    def __post_init__(self):
        if self.d_in < 1:
            raise InputError("d_in must be >= 1")
        if self.heads < 1:
            raise InputError("heads must be >= 1")
        if not (0.0 < self.leaky_slope < 1.0):
            raise InputError("leaky_slope must lie in (0, 1)")
        if self.class_weight <= 0:
            raise InputError("class_weight must be > 0")
        if self.l2_penalty < 0:
            raise InputError("l2_penalty must be >= 0")
        if self.learning_rate <= 0:
            raise InputError("learning_rate must be > 0")
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise InputError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def head_dim(self):
        if self.d_head is not None:
            return self.d_head
        return -(-self.d_in // self.heads)  # ceil(d_in / heads)

    @property
    def d_out(self):
        return self.heads * self.head_dim


@dataclass
class GatParams:
    """Per-head linear maps M, attention vectors a, and the classifier head.

    Shapes: M (K, d_head, d_in); a (K, 2*d_head); w (2, K*d_head); b (2,).
    Logit column order is [negative, non-negative].
    """

    M: np.ndarray
    a: np.ndarray
    w: np.ndarray
    b: np.ndarray

    def flatten(self):
        return np.concatenate([p.ravel() for p in (self.M, self.a, self.w, self.b)])

    def with_flat(self, flat):
        out = []
        offset = 0
        for p in (self.M, self.a, self.w, self.b):
            out.append(flat[offset:offset + p.size].reshape(p.shape))
            offset += p.size
        return GatParams(*out)

    def l2_norm_sq(self):
        return float(sum(np.sum(p * p) for p in (self.M, self.a, self.w, self.b)))

    def copy(self):
        return GatParams(self.M.copy(), self.a.copy(), self.w.copy(), self.b.copy())


def init_params(config):
    """Seeded Glorot-style uniform initialization; biases start at zero."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    k, p, d = config.heads, config.head_dim, config.d_in

    def glorot(shape, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    return GatParams(
        M=glorot((k, p, d), d, p),
        a=glorot((k, 2 * p), 2 * p, 1),
        w=glorot((2, k * p), k * p, 2),
        b=np.zeros(2),
    )


def leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


def _leaky_grad(x, slope):
    return np.where(x > 0, 1.0, slope)


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def attention_logit(h_i, h_j, M_k, a_k, leaky_slope=0.2):
    """Importance of message j to message i for one head (a scalar)."""
    wi = M_k @ np.asarray(h_i, dtype=np.float64)
    wj = M_k @ np.asarray(h_j, dtype=np.float64)
    pre = float(np.asarray(a_k, dtype=np.float64) @ np.concatenate([wi, wj]))
    return pre if pre > 0 else leaky_slope * pre


def normalize_attention(e_row):
    """Softmax over one neighborhood, max-subtracted for overflow safety."""
    e_row = np.asarray(e_row, dtype=np.float64)
    if e_row.size == 0:
        raise InputError("cannot normalize an empty neighborhood")
    shifted = np.exp(e_row - e_row.max())
    return shifted / shifted.sum()


def _row_lengths(indptr):
    return np.diff(indptr)


def _row_softmax(values, indptr, lengths):
    # per-row max subtraction; rows are guaranteed non-empty by the caller
    row_max = np.maximum.reduceat(values, indptr[:-1])
    ex = np.exp(values - np.repeat(row_max, lengths))
    denom = np.add.reduceat(ex, indptr[:-1])
    return ex / np.repeat(denom, lengths)


def _check_forward_inputs(graph, H, config):
    H = check_embeddings(H, n=graph.n, d=config.d_in)
    lengths = _row_lengths(graph.indptr)
    if np.any(lengths == 0):
        empty = int(np.argmax(lengths == 0))
        raise InputError(
            f"node {empty} has an empty neighborhood; "
            "build the graph with self_loops=True"
        )
    return H, lengths


def _forward_cache(graph, H, params, config):
    H, lengths = _check_forward_inputs(graph, H, config)
    indptr, indices = graph.indptr, graph.indices
    edge_row = np.repeat(np.arange(graph.n), lengths)
    p = config.head_dim
    act = _elu if config.activation == "elu" else (lambda x: x)

    heads = []
    cols = []
    for k in range(config.heads):
        W = H @ params.M[k].T
        s = W @ params.a[k, :p]
        t = W @ params.a[k, p:]
        u = s[edge_row] + t[indices]
        e = leaky_relu(u, config.leaky_slope)
        alpha = _row_softmax(e, indptr, lengths)
        adj = graph.to_csr(alpha)
        agg = adj @ W
        z_k = act(agg)
        heads.append({"W": W, "u": u, "alpha": alpha, "adj": adj, "agg": agg})
        cols.append(z_k)

    Z = np.concatenate(cols, axis=1)
    logits = Z @ params.w.T + params.b
    shifted = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(shifted)
    P = expl / expl.sum(axis=1, keepdims=True)
    return {
        "H": H, "Z": Z, "P": P, "heads": heads,
        "edge_row": edge_row, "lengths": lengths,
    }


def forward(graph, H, params, config):
    """Node embeddings Z (n, K*d_head) and non-negative probabilities (n,)."""
    cache = _forward_cache(graph, H, params, config)
    return cache["Z"], cache["P"][:, 1]


def predict(graph, H, params, config):
    """Non-negative class probability per node."""
    return forward(graph, H, params, config)[1]


def attention_matrices(graph, H, params, config):
    """Per-head attention coefficient CSR matrices (diagnostics and tests)."""
    cache = _forward_cache(graph, H, params, config)
    return [head["adj"] for head in cache["heads"]]


def loss(p_nonneg, y, params, class_weight, l2_penalty):
    """Class-weighted cross-entropy over the labeled set plus l2 penalty.

    ``p_nonneg`` and ``y`` (1 non-negative / 0 negative) cover the labeled
    nodes only.  Probabilities are clamped to [eps, 1-eps] inside the logs.
    """
    y = check_binary_labels(y, "labels")
    if y.size == 0:
        raise InputError("loss needs a non-empty labeled set")
    p = np.clip(np.asarray(p_nonneg, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    nn = y == 1
    neg = ~nn
    norm = nn.sum() + class_weight * neg.sum()
    data = -(np.log(p[nn]).sum() + class_weight * np.log1p(-p[neg]).sum()) / norm
    return float(data + l2_penalty * params.l2_norm_sq())


def _loss_and_grads(graph, H, params, config, y_full):
    """Loss plus exact gradients for every parameter tensor."""
    cache = _forward_cache(graph, H, params, config)
    labeled = np.flatnonzero(y_full >= 0)
    if labeled.size == 0:
        raise InputError("training needs at least one labeled node")
    y = y_full[labeled]
    P = cache["P"]
    r, lam = config.class_weight, config.l2_penalty

    p_nn = np.clip(P[labeled, 1], PROB_EPS, 1.0 - PROB_EPS)
    nn = y == 1
    norm = nn.sum() + r * (~nn).sum()
    data = -(np.log(p_nn[nn]).sum() + r * np.log1p(-p_nn[~nn]).sum()) / norm
    total = float(data + lam * params.l2_norm_sq())

    # d(loss)/d(logits): class-weighted softmax cross-entropy residuals
    dlogits = np.zeros_like(P)
    weights = np.where(nn, 1.0, r) / norm
    resid = P[labeled].copy()
    resid[np.arange(labeled.size), y] -= 1.0
    dlogits[labeled] = weights[:, None] * resid

    Z = cache["Z"]
    grad_w = dlogits.T @ Z + 2.0 * lam * params.w
    grad_b = dlogits.sum(axis=0) + 2.0 * lam * params.b
    dZ = dlogits @ params.w

    p = config.head_dim
    indptr, indices = graph.indptr, graph.indices
    edge_row, lengths = cache["edge_row"], cache["lengths"]
    slope = config.leaky_slope
    act_grad = _elu_grad if config.activation == "elu" else (lambda x: np.ones_like(x))

    grad_M = np.empty_like(params.M)
    grad_a = np.empty_like(params.a)
    for k, head in enumerate(cache["heads"]):
        W, u, alpha, adj, agg = head["W"], head["u"], head["alpha"], head["adj"], head["agg"]
        dagg = dZ[:, k * p:(k + 1) * p] * act_grad(agg)
        dalpha = np.einsum("ij,ij->i", dagg[edge_row], W[indices])
        dW = adj.T @ dagg
        # softmax backward per neighborhood row
        row_dot = np.add.reduceat(alpha * dalpha, indptr[:-1])
        de = alpha * (dalpha - np.repeat(row_dot, lengths))
        du = de * _leaky_grad(u, slope)
        ds = np.add.reduceat(du, indptr[:-1])
        dt = np.bincount(indices, weights=du, minlength=graph.n)
        a1, a2 = params.a[k, :p], params.a[k, p:]
        dW += np.outer(ds, a1) + np.outer(dt, a2)
        grad_a[k, :p] = W.T @ ds
        grad_a[k, p:] = W.T @ dt
        grad_M[k] = dW.T @ cache["H"]

    grad_M += 2.0 * lam * params.M
    grad_a += 2.0 * lam * params.a
    return total, GatParams(grad_M, grad_a, grad_w, grad_b)


def gradients(graph, H, params, y_full, config):
    """Analytic gradient of the training loss for every parameter."""
    return _loss_and_grads(graph, H, params, config, check_binary_labels(
        y_full, "labels", allow_unlabeled=True))[1]


def training_loss(graph, H, params, y_full, config):
    """The exact objective optimized by `train` (labeled nodes of y_full)."""
    y_full = check_binary_labels(y_full, "labels", allow_unlabeled=True)
    labeled = np.flatnonzero(y_full >= 0)
    _, p_nonneg = forward(graph, H, params, config)
    return loss(p_nonneg[labeled], y_full[labeled], params,
                config.class_weight, config.l2_penalty)


def train(graph, H, y_full, config, init=None):
    """Full-batch Adam from seeded initialization.

    ``y_full`` holds one entry per node: 1 non-negative, 0 negative, -1
    unlabeled (unlabeled nodes contribute through the graph only).  Returns
    ``(params, loss_trace)`` where the trace has one entry per epoch plus a
    final evaluation.  Raises ComputationError on a non-finite loss.
    """
    y_full = check_binary_labels(y_full, "labels", allow_unlabeled=True)
    if len(y_full) != graph.n:
        raise InputError("labels must carry one entry per node")
    params = init.copy() if init is not None else init_params(config)
    flat = params.flatten()
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    trace = []
    for epoch in range(1, config.epochs + 1):
        value, grads = _loss_and_grads(graph, H, params.with_flat(flat), config, y_full)
        if not np.isfinite(value):
            raise ComputationError(f"training diverged at epoch {epoch} (loss={value})")
        trace.append(value)
        g = grads.flatten()
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** epoch)
        v_hat = v / (1.0 - ADAM_BETA2 ** epoch)
        flat = flat - config.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    params = params.with_flat(flat)
    final = training_loss(graph, H, params, y_full, config)
    if not np.isfinite(final):
        raise ComputationError(f"training diverged at epoch {config.epochs} (loss={final})")
    trace.append(final)
    return params, trace


def _stratified_folds(y_labeled, folds, seed):
    """Deterministic class-stratified fold assignment over labeled positions."""
    rng = np.random.Generator(np.random.PCG64(seed))
    assignment = np.empty(y_labeled.size, dtype=np.int64)
    for cls in (0, 1):
        pos = np.flatnonzero(y_labeled == cls)
        if pos.size < folds:
            raise InputError(
                f"class {cls} has {pos.size} labeled cases; cannot build {folds} "
                "folds with both classes present"
            )
        rng.shuffle(pos)
        assignment[pos] = np.arange(pos.size) % folds
    return assignment


def cross_validate_lambda(graph, H, y_full, grid, config, folds=4):
    """Pick the l2 penalty maximizing mean validation geometric-mean score.

    The per-fold score is the optimized geometric mean of sensitivity and
    PPV (the calibration criterion).  Grid values whose training diverges
    score -inf.  Ties break toward the larger penalty.  Returns
    ``(best_lambda, {lambda: [fold scores]})``.
    """
    from .calibrate import optimal_cutoff

    grid = list(grid)
    if not grid:
        raise InputError("lambda grid must be non-empty")
    y_full = check_binary_labels(y_full, "labels", allow_unlabeled=True)
    labeled = np.flatnonzero(y_full >= 0)
    assignment = _stratified_folds(y_full[labeled], folds, config.seed)

    results = {}
    for lam in grid:
        cfg = replace(config, l2_penalty=float(lam))
        scores = []
        for fold in range(folds):
            val_nodes = labeled[assignment == fold]
            y_cv = y_full.copy()
            y_cv[val_nodes] = -1
            try:
                params, _ = train(graph, H, y_cv, cfg)
                p = predict(graph, H, params, cfg)
                scores.append(optimal_cutoff(p[val_nodes], y_full[val_nodes]).score)
            except ComputationError:
                scores.append(float("-inf"))
        results[float(lam)] = scores

    def mean_score(lam):
        return float(np.mean(results[lam]))

    best = max(sorted(results), key=lambda lam: (mean_score(lam), lam))
    return best, results


# ---------------------------------------------------------------------------
# Checkpoint container: GSEM-style binary with named sections per tensor.


def save_checkpoint(path, params, config):
    """Binary checkpoint: magic, named float64 sections, config JSON trailer."""
    import json

    sections = [("M", params.M), ("a", params.a), ("w", params.w), ("b", params.b)]
    meta = {
        "d_in": config.d_in, "heads": config.heads, "d_head": config.head_dim,
        "leaky_slope": config.leaky_slope, "class_weight": config.class_weight,
        "l2_penalty": config.l2_penalty, "learning_rate": config.learning_rate,
        "epochs": config.epochs, "seed": config.seed, "activation": config.activation,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", 1, len(sections)))
        for name, tensor in sections:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def load_checkpoint(path):
    """Load a checkpoint written by `save_checkpoint` -> (params, config)."""
    import json

    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise InputError(f"{path}: not a parameter checkpoint")
        version, nsections = struct.unpack("<II", fh.read(8))
        if version != 1:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(nsections):
            (namelen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(namelen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            tensors[name] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()
        (bloblen,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(bloblen).decode("utf-8"))
    try:
        params = GatParams(tensors["M"], tensors["a"], tensors["w"], tensors["b"])
    except KeyError as exc:
        raise InputError(f"{path}: checkpoint is missing section {exc}") from None
    config = GatConfig(
        d_in=meta["d_in"], heads=meta["heads"], d_head=meta["d_head"],
        leaky_slope=meta["leaky_slope"], class_weight=meta["class_weight"],
        l2_penalty=meta["l2_penalty"], learning_rate=meta["learning_rate"],
        epochs=meta["epochs"], seed=meta["seed"], activation=meta["activation"],
    )
    return params, config


# ---------------------------------------------------------------------------
# Estimator wrapper


class GatClassifier(BaseEstimator):
    """sklearn-style transductive wrapper around the functional GAT core.

    The reply graph is fixed at construction (the estimator is transductive);
    ``fit(X, y)`` takes the node embedding matrix and a per-node label vector
    with -1 marking unlabeled nodes, mirroring sklearn's semi-supervised
    convention.  ``predict_proba`` columns are [negative, non-negative].
    """

    def __init__(self, graph=None, heads=4, d_head=None, leaky_slope=0.2,
                 class_weight=2.0, l2_penalty=0.08, learning_rate=0.02,
                 epochs=200, seed=0, activation="elu"):
        self.graph = graph
        self.heads = heads
        self.d_head = d_head
        self.leaky_slope = leaky_slope
        self.class_weight = class_weight
        self.l2_penalty = l2_penalty
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.seed = seed
        self.activation = activation

    def _config(self, d_in):
        return GatConfig(
            d_in=d_in, heads=self.heads, d_head=self.d_head,
            leaky_slope=self.leaky_slope, class_weight=self.class_weight,
            l2_penalty=self.l2_penalty, learning_rate=self.learning_rate,
            epochs=self.epochs, seed=self.seed, activation=self.activation,
        )

    def fit(self, X, y):
        if self.graph is None:
            raise InputError("GatClassifier needs a graph")
        X = check_embeddings(X, n=self.graph.n)
        self.config_ = self._config(X.shape[1])
        self.params_, self.loss_trace_ = train(self.graph, X, y, self.config_)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        if not hasattr(self, "params_"):
            raise InputError("GatClassifier is not fitted")
        p = predict(self.graph, X, self.params_, self.config_)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)
