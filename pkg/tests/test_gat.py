import dataclasses
import math

import numpy as np
import pytest

from graphsent.errors import ComputationError, InputError
from graphsent.gat import (GatClassifier, GatConfig, GatParams, attention_logit,
                           cross_validate_lambda, forward, gradients, init_params,
                           load_checkpoint, loss, normalize_attention, predict,
                           save_checkpoint, train, training_loss)
from graphsent.graph import build_graph


# ---------------------------------------------------------------------------
# Independent straight-line oracle: explicit loops, no shared package helpers.


def straight_line_forward(neighbor_lists, H, M, a, w, b, slope, activation):
    n = len(neighbor_lists)
    K = len(M)
    z_rows = []
    for i in range(n):
        pieces = []
        for k in range(K):
            raw = []
            for j in neighbor_lists[i]:
                wi = M[k] @ H[i]
                wj = M[k] @ H[j]
                pre = float(a[k] @ np.concatenate([wi, wj]))
                raw.append(pre if pre > 0 else slope * pre)
            raw = np.array(raw)
            ex = np.exp(raw - raw.max())
            alpha = ex / ex.sum()
            agg = np.zeros(M[k].shape[0])
            for weight, j in zip(alpha, neighbor_lists[i]):
                agg += weight * (M[k] @ H[j])
            if activation == "elu":
                agg = np.where(agg > 0, agg, np.exp(agg) - 1.0)
            pieces.append(agg)
        z_rows.append(np.concatenate(pieces))
    Z = np.array(z_rows)
    logits = Z @ w.T + b
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    P = shifted / shifted.sum(axis=1, keepdims=True)
    return Z, P[:, 1]


def _random_instance(seed, n=5, d_in=3, heads=2, d_head=2, activation="elu",
                     extra_edges=4):
    rng = np.random.default_rng(seed)
    edges = [(int(rng.integers(n)), int(rng.integers(n))) for _ in range(extra_edges)]
    g = build_graph(edges, n)
    H = rng.normal(size=(n, d_in))
    cfg = GatConfig(d_in=d_in, heads=heads, d_head=d_head, activation=activation,
                    l2_penalty=0.05, seed=seed)
    params = GatParams(
        M=rng.normal(scale=0.7, size=(heads, d_head, d_in)),
        a=rng.normal(scale=0.7, size=(heads, 2 * d_head)),
        w=rng.normal(scale=0.7, size=(2, heads * d_head)),
        b=rng.normal(scale=0.3, size=2),
    )
    y = rng.integers(0, 2, size=n)
    y[rng.integers(n)] = -1
    if np.all(y[y >= 0] == 1):
        y[np.argmax(y == 1)] = 0
    if np.all(y[y >= 0] == 0):
        y[np.argmax(y == 0)] = 1
    return g, H, cfg, params, y


def test_attention_logit_hand_values():
    M = np.array([[1.0]])
    a = np.array([1.0, 1.0])
    assert attention_logit([2.0], [3.0], M, a, 0.2) == pytest.approx(5.0)
    assert attention_logit([-2.0], [-3.0], M, a, 0.2) == pytest.approx(-1.0)


def test_attention_logit_zero_weights():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(3, 4))
    a = np.zeros(6)
    assert attention_logit(rng.normal(size=4), rng.normal(size=4), M, a) == 0.0


def test_normalize_attention_examples():
    np.testing.assert_allclose(normalize_attention([3.7]), [1.0])
    np.testing.assert_allclose(normalize_attention([0.0, 0.0, 0.0]), np.full(3, 1 / 3))
    out = normalize_attention([1000.0, 1000.0])
    np.testing.assert_allclose(out, [0.5, 0.5])
    assert np.all(np.isfinite(out))


def test_forward_uniform_attention_averages_neighbors():
    # K=1, M=I, a=0 (uniform attention), identity activation
    g = build_graph([(1, 0), (2, 0)], n=3, self_loops=False)
    H = np.array([[10.0, 0.0], [2.0, 4.0], [6.0, 8.0]])
    cfg = GatConfig(d_in=2, heads=1, d_head=2, activation="identity")
    params = GatParams(M=np.eye(2)[None], a=np.zeros((1, 4)),
                       w=np.zeros((2, 2)), b=np.zeros(2))
    Z, p = forward(g, H, params, cfg)
    np.testing.assert_allclose(Z[0], (H[1] + H[2]) / 2.0)
    np.testing.assert_allclose(p, 0.5)  # zero classifier head -> equal logits


def test_forward_matches_straight_line_oracle():
    # 3-node path graph, fixed small parameters, both activations
    edges = [(0, 1), (1, 2)]
    for activation in ("identity", "elu"):
        g = build_graph(edges, n=3)
        rng = np.random.default_rng(7)
        H = rng.normal(size=(3, 2))
        cfg = GatConfig(d_in=2, heads=2, d_head=2, activation=activation)
        params = GatParams(
            M=rng.normal(size=(2, 2, 2)), a=rng.normal(size=(2, 4)),
            w=rng.normal(size=(2, 4)), b=rng.normal(size=2),
        )
        Z, p = forward(g, H, params, cfg)
        neighbor_lists = [g.neighbors(i).tolist() for i in range(3)]
        Z_ref, p_ref = straight_line_forward(
            neighbor_lists, H, params.M, params.a, params.w, params.b,
            cfg.leaky_slope, activation)
        np.testing.assert_allclose(Z, Z_ref, atol=1e-12)
        np.testing.assert_allclose(p, p_ref, atol=1e-12)


def test_forward_requires_non_empty_neighborhoods():
    g = build_graph([], n=2, self_loops=False)
    cfg = GatConfig(d_in=1, heads=1, d_head=1)
    params = init_params(cfg)
    with pytest.raises(InputError, match="empty neighborhood"):
        forward(g, np.zeros((2, 1)), params, cfg)


def test_attention_rows_sum_to_one():
    from graphsent.gat import attention_matrices

    g, H, cfg, params, _ = _random_instance(11, n=40, extra_edges=120)
    for adj in attention_matrices(g, H, params, cfg):
        sums = np.asarray(adj.sum(axis=1)).ravel()
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)


def test_loss_examples():
    cfg = GatConfig(d_in=1, heads=1, d_head=1)
    zero = GatParams(np.zeros((1, 1, 1)), np.zeros((1, 2)), np.zeros((2, 1)),
                     np.zeros(2))
    # perfect confident predictions, lambda=0 -> ~0
    assert loss(np.array([1.0, 0.0]), np.array([1, 0]), zero, 2.0, 0.0) == \
        pytest.approx(0.0, abs=1e-9)
    # single non-negative example at p=0.5 -> log 2
    assert loss(np.array([0.5]), np.array([1]), zero, 2.0, 0.0) == \
        pytest.approx(math.log(2.0))
    # penalty arithmetic: ||theta||^2 = 10, lambda = 0.08, data term ~ 0
    params = GatParams(np.full((1, 1, 1), 3.0), np.zeros((1, 2)),
                       np.full((2, 1), np.sqrt(0.5)), np.zeros(2))
    assert params.l2_norm_sq() == pytest.approx(10.0)
    value = loss(np.array([1.0]), np.array([1]), params, 2.0, 0.08)
    assert value == pytest.approx(0.8, abs=1e-9)


def test_loss_monotone_in_penalty():
    g, H, cfg, params, y = _random_instance(3)
    labeled = y >= 0
    _, p = forward(g, H, params, cfg)
    values = [loss(p[labeled], y[labeled], params, cfg.class_weight, lam)
              for lam in (0.0, 0.04, 0.08, 0.8)]
    assert values == sorted(values)


def test_loss_rejects_empty_labeled_set():
    cfg = GatConfig(d_in=1, heads=1, d_head=1)
    with pytest.raises(InputError):
        loss(np.array([]), np.array([], dtype=int), init_params(cfg), 2.0, 0.0)


def _max_relative_fd_error(g, H, cfg, params, y, h=1e-5):
    analytic = gradients(g, H, params, y, cfg).flatten()
    flat = params.flatten()
    worst = 0.0
    for idx in range(flat.size):
        step = np.zeros_like(flat)
        step[idx] = h
        up = training_loss(g, H, params.with_flat(flat + step), y, cfg)
        down = training_loss(g, H, params.with_flat(flat - step), y, cfg)
        fd = (up - down) / (2.0 * h)
        worst = max(worst, abs(analytic[idx] - fd) / max(abs(fd), 1e-6))
    return worst


def test_gradients_match_central_differences():
    for seed in range(4):
        g, H, cfg, params, y = _random_instance(seed)
        assert _max_relative_fd_error(g, H, cfg, params, y) < 1e-4


def test_gradient_penalty_only_path():
    # with the classifier map zeroed, the data path cannot reach M or a,
    # so their gradient is exactly the penalty gradient 2*lambda*theta
    g, H, cfg, params, y = _random_instance(5)
    params = GatParams(params.M, params.a, np.zeros_like(params.w),
                       np.zeros_like(params.b))
    grads = gradients(g, H, params, y, cfg)
    np.testing.assert_allclose(grads.M, 2.0 * cfg.l2_penalty * params.M, atol=1e-12)
    np.testing.assert_allclose(grads.a, 2.0 * cfg.l2_penalty * params.a, atol=1e-12)


def test_gradient_penalty_difference_identity():
    g, H, cfg, params, y = _random_instance(6)
    lam = 0.3
    with_pen = gradients(g, H, params, y, dataclasses.replace(cfg, l2_penalty=lam))
    without = gradients(g, H, params, y, dataclasses.replace(cfg, l2_penalty=0.0))
    np.testing.assert_allclose(with_pen.flatten() - without.flatten(),
                               2.0 * lam * params.flatten(), atol=1e-12)


def test_negative_class_gradient_scales_linearly_in_r():
    # W(r) * grad(r) is affine in r, so consecutive unit increments agree
    g, H, cfg, params, y = _random_instance(8)
    cfg = dataclasses.replace(cfg, l2_penalty=0.0)

    def scaled_grad(r):
        c = dataclasses.replace(cfg, class_weight=r)
        labeled = y[y >= 0]
        norm = np.sum(labeled == 1) + r * np.sum(labeled == 0)
        return norm * gradients(g, H, params, y, c).flatten()

    first = scaled_grad(2.0) - scaled_grad(1.0)
    second = scaled_grad(3.0) - scaled_grad(2.0)
    np.testing.assert_allclose(first, second, atol=1e-10)


# ---------------------------------------------------------------------------
# Training


def two_cluster_instance(seed, n=50, d=4):
    rng = np.random.default_rng(seed)
    y = np.array([0] * (n // 2) + [1] * (n - n // 2))
    H = rng.normal(scale=0.8, size=(n, d))
    H[:, 0] += np.where(y == 1, 1.5, -1.5)
    edges = []
    for i in range(n):
        same = np.flatnonzero(y == y[i])
        for j in rng.choice(same, size=4, replace=False):
            if j != i:
                edges.append((i, int(j)))
        if rng.random() < 0.3:
            other = np.flatnonzero(y != y[i])
            edges.append((i, int(rng.choice(other))))
    g = build_graph(edges, n)
    labeled = rng.permutation(n)[:30]
    y_train = np.full(n, -1, dtype=np.int64)
    y_train[labeled] = y[labeled]
    if not {0, 1} <= set(y_train[labeled].tolist()):  # pragma: no cover
        raise AssertionError("fixture needs both classes labeled")
    return g, H, y, y_train, labeled


def test_train_planted_clusters_reaches_high_heldout_accuracy():
    g, H, y_true, y_train, labeled = two_cluster_instance(0)
    cfg = GatConfig(d_in=4, heads=2, d_head=2, epochs=200, l2_penalty=0.01, seed=0)
    params, trace = train(g, H, y_train, cfg)
    assert np.all(np.isfinite(trace))
    held_out = np.setdiff1d(np.arange(g.n), labeled)
    pred = (predict(g, H, params, cfg) >= 0.5).astype(int)
    accuracy = np.mean(pred[held_out] == y_true[held_out])
    assert accuracy >= 0.9


def test_train_is_deterministic():
    g, H, _, y_train, _ = two_cluster_instance(1)
    cfg = GatConfig(d_in=4, heads=2, d_head=2, epochs=30, seed=9)
    params_a, trace_a = train(g, H, y_train, cfg)
    params_b, trace_b = train(g, H, y_train, cfg)
    assert trace_a == trace_b
    assert np.array_equal(params_a.flatten(), params_b.flatten())


def test_train_first_step_is_signed_learning_rate():
    # Adam's first update moves every coordinate by lr * g/(|g| + eps)
    g, H, _, y_train, _ = two_cluster_instance(2)
    cfg = GatConfig(d_in=4, heads=2, d_head=2, epochs=1, seed=4)
    start = init_params(cfg)
    grad = gradients(g, H, start, y_train, cfg).flatten()
    params, _ = train(g, H, y_train, cfg)
    expected = start.flatten() - cfg.learning_rate * grad / (np.abs(grad) + 1e-8)
    np.testing.assert_allclose(params.flatten(), expected, atol=1e-12)


@pytest.mark.filterwarnings("ignore:overflow")
def test_train_reports_divergence_epoch():
    g, H, _, y_train, _ = two_cluster_instance(3)
    cfg = GatConfig(d_in=4, heads=1, d_head=2, epochs=5, seed=1)
    bad = init_params(cfg)
    bad.w[:] = 1e160  # overflows the penalty term immediately
    with pytest.raises(ComputationError, match="epoch 1"):
        train(g, H, y_train, cfg, init=bad)


def test_predict_identical_embeddings_give_identical_probabilities():
    g = build_graph([(0, 1), (2, 3), (1, 4)], n=5)
    H = np.tile([0.3, -1.2, 0.5], (5, 1))
    cfg = GatConfig(d_in=3, heads=2, d_head=2, seed=0)
    p = predict(g, H, init_params(cfg), cfg)
    np.testing.assert_allclose(p, p[0])


def test_predict_permutation_equivariance():
    g, H, cfg, params, _ = _random_instance(13, n=6, extra_edges=7)
    p = predict(g, H, params, cfg)
    rng = np.random.default_rng(0)
    perm = rng.permutation(6)
    # rebuild the graph under the relabeling perm
    edges = []
    for i in range(6):
        for j in g.neighbors(i):
            edges.append((int(perm[j]), int(perm[i])))  # j in N(i): j replies to i
    g_perm = build_graph(edges, 6, symmetric=False, self_loops=False)
    p_perm = predict(g_perm, H[np.argsort(perm)], params, cfg)
    np.testing.assert_allclose(p_perm[perm], p, atol=1e-12)


# ---------------------------------------------------------------------------
# Cross-validation


def test_cross_validate_singleton_grid():
    g, H, _, y_train, _ = two_cluster_instance(4)
    cfg = GatConfig(d_in=4, heads=1, d_head=2, epochs=10, seed=2)
    best, scores = cross_validate_lambda(g, H, y_train, [0.08], cfg)
    assert best == 0.08
    assert len(scores[0.08]) == 4


def test_cross_validate_absorbs_divergence(monkeypatch):
    import graphsent.gat as gat_module

    g, H, _, y_train, _ = two_cluster_instance(5)
    cfg = GatConfig(d_in=4, heads=1, d_head=2, epochs=10, seed=2)
    real_train = gat_module.train

    def flaky_train(graph, H_, y_, config, init=None):
        if config.l2_penalty == 0.5:
            raise ComputationError("forced divergence")
        return real_train(graph, H_, y_, config, init=init)

    monkeypatch.setattr(gat_module, "train", flaky_train)
    best, scores = cross_validate_lambda(g, H, y_train, [0.5, 0.08], cfg)
    assert best == 0.08
    assert all(s == float("-inf") for s in scores[0.5])


def test_cross_validate_deterministic_over_grid():
    g, H, _, y_train, _ = two_cluster_instance(6)
    cfg = GatConfig(d_in=4, heads=1, d_head=2, epochs=15, seed=3)
    grid = [0.0, 0.08, 0.8]
    best_a, scores_a = cross_validate_lambda(g, H, y_train, grid, cfg)
    best_b, scores_b = cross_validate_lambda(g, H, y_train, grid, cfg)
    assert best_a == best_b
    assert scores_a == scores_b


def test_cross_validate_needs_enough_labeled_cases():
    g = build_graph([(0, 1)], n=6)
    H = np.zeros((6, 2))
    y = np.array([1, 0, -1, -1, -1, -1])
    cfg = GatConfig(d_in=2, heads=1, d_head=1, epochs=2)
    with pytest.raises(InputError, match="folds"):
        cross_validate_lambda(g, H, y, [0.1], cfg)


# ---------------------------------------------------------------------------
# Estimator wrapper and checkpointing


def test_estimator_round_trip():
    g, H, y_true, y_train, labeled = two_cluster_instance(7)
    clf = GatClassifier(graph=g, heads=2, d_head=2, epochs=60, l2_penalty=0.01,
                        seed=1)
    assert clf.get_params()["heads"] == 2
    clf.set_params(epochs=50)
    clf.fit(H, y_train)
    proba = clf.predict_proba(H)
    assert proba.shape == (g.n, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    accuracy = np.mean(clf.predict(H)[labeled] == y_true[labeled])
    assert accuracy >= 0.9


def test_checkpoint_round_trip(tmp_path):
    g, H, _, y_train, _ = two_cluster_instance(8)
    cfg = GatConfig(d_in=4, heads=2, d_head=3, epochs=5, seed=11)
    params, _ = train(g, H, y_train, cfg)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, params, cfg)
    loaded, loaded_cfg = load_checkpoint(path)
    assert loaded_cfg == cfg
    np.testing.assert_array_equal(loaded.flatten(), params.flatten())
    # identical rewrite is byte-identical
    path2 = tmp_path / "ckpt2.bin"
    save_checkpoint(path2, loaded, loaded_cfg)
    assert path.read_bytes() == path2.read_bytes()
