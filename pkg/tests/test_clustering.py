import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from u3ds3.clustering import (CentroidSet, assign_labels, class_weights, handle_degenerate,
                              kmeans_pp, l2_normalize, label_histogram, lloyd, minibatch_update,
                              objective)


def brute_force_labels(features, sp_ids, centroids):
    """Per superpoint, try every label and keep the cheapest (lowest index on ties)."""
    out = np.empty(len(features), dtype=np.int64)
    for s in np.unique(sp_ids):
        m = sp_ids == s
        costs = [((features[m] - c) ** 2).sum() for c in centroids]
        out[m] = int(np.argmin(costs))
    return out


def test_superpoint_overrides_nearest_point():
    f = np.array([[0.0, 0.0], [2.0, 0.0]])
    mu = np.array([[-0.1, 0.0], [1.9, 0.0]])
    costs = [((f - c) ** 2).sum() for c in mu]
    np.testing.assert_allclose(costs, [4.42, 3.62])
    assert assign_labels(f, np.array([0, 0]), mu).tolist() == [1, 1]
    assert assign_labels(f, np.array([0, 1]), mu).tolist() == [0, 1]


def test_singletons_are_nearest_centroid():
    rng = np.random.default_rng(0)
    f, mu = rng.normal(size=(100, 4)), rng.normal(size=(5, 4))
    d = ((f[:, None] - mu[None]) ** 2).sum(-1)
    assert np.array_equal(assign_labels(f, np.arange(100), mu), d.argmin(1))


def test_feature_on_centroid():
    mu = np.eye(3)
    assert assign_labels(mu[2:3], np.array([0]), mu).tolist() == [2]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(1, 10), st.integers(1, 16), st.integers(0, 10_000))
def test_shortcut_equals_brute_force(n, k, d, seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(n, d))
    sp = rng.integers(0, 4, n)
    mu = rng.normal(size=(k, d))
    assert np.array_equal(assign_labels(f, sp, mu), brute_force_labels(f, sp, mu))


def test_tie_goes_to_lowest_index():
    mu = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    assert assign_labels(np.array([[1.0, 0.0]]), np.array([0]), mu).tolist() == [0]


# ---------------------------------------------------------------------------
# mini-batch updates


def test_first_assignment_absorbs_point():
    cs = CentroidSet(l2_normalize(np.array([[0.0, 1.0]])), np.zeros(1, np.int64))
    x = np.array([[3.0, 4.0]])
    minibatch_update(cs, x, np.array([0]))
    np.testing.assert_allclose(cs.centroids[0], [0.6, 0.8])
    assert cs.counts.tolist() == [1]


def test_fixed_point():
    x = l2_normalize(np.array([[1.0, 2.0, 2.0]]))
    cs = CentroidSet(x.copy(), np.array([5]))
    minibatch_update(cs, np.vstack([x, x]), np.array([0, 0]))
    np.testing.assert_allclose(cs.centroids, x, atol=1e-15)


def test_two_step_recurrence():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    # step-by-step replay of mu += (x - mu) / n
    mu, n = e1.copy(), 1
    for x in (e1, e2):
        n += 1
        mu = mu + (x - mu) / n
    expect = mu / np.linalg.norm(mu)
    np.testing.assert_allclose(expect, np.array([2.0, 1.0]) / np.sqrt(5))
    cs = CentroidSet(e1[None].copy(), np.array([1]))
    minibatch_update(cs, np.vstack([e1, e2]), np.array([0, 0]))
    np.testing.assert_allclose(cs.centroids[0], expect, atol=1e-15)


def test_untouched_centroids_unchanged():
    rng = np.random.default_rng(1)
    cs = CentroidSet(l2_normalize(rng.normal(size=(3, 4))), np.array([2, 2, 2]))
    before = cs.copy()
    minibatch_update(cs, rng.normal(size=(5, 4)), np.zeros(5, int), perturb=1e-4, rng=rng)
    assert np.array_equal(cs.centroids[1:], before.centroids[1:])
    np.testing.assert_allclose(np.linalg.norm(cs.centroids, axis=1), 1.0)


def test_perturbation_needs_rng():
    cs = CentroidSet(np.eye(2), np.zeros(2, np.int64))
    with pytest.raises(ValueError):
        minibatch_update(cs, np.eye(2), np.array([0, 1]), perturb=1e-4)


# ---------------------------------------------------------------------------
# degeneracy and weights


def test_no_empty_cluster_no_change():
    cs = CentroidSet(np.eye(3), np.array([4, 4, 4]))
    out, hist = handle_degenerate(cs.copy(), np.array([3, 1, 2]), np.random.default_rng(0))
    assert np.array_equal(out.centroids, np.eye(3)) and hist.tolist() == [3, 1, 2]


def test_split_rule_replay():
    cs = CentroidSet(np.eye(3), np.array([10, 0, 2]))
    out, hist = handle_degenerate(cs, np.array([10, 0, 2]), np.random.default_rng(0), sigma=1e-3)
    assert hist.tolist() == [5, 5, 2]
    assert out.counts.tolist() == [5, 5, 2]
    assert 0 < np.linalg.norm(out.centroids[1] - out.centroids[0]) < 1e-2


def test_consecutive_empty_labels_in_order():
    cs = CentroidSet(np.eye(4), np.array([12, 0, 0, 3]))
    out, hist = handle_degenerate(cs, np.array([12, 0, 0, 3]), np.random.default_rng(0))
    # label 1 splits 12 -> (6, 6); label 2 then splits the current largest, label 0 again
    assert hist.tolist() == [3, 6, 3, 3]
    assert np.linalg.norm(out.centroids[2] - out.centroids[0]) < 1e-2


def test_all_empty_is_error():
    with pytest.raises(ValueError):
        handle_degenerate(CentroidSet(np.eye(2), np.zeros(2, np.int64)), np.zeros(2),
                          np.random.default_rng(0))


def test_uniform_histogram_weights():
    np.testing.assert_allclose(class_weights([5, 5, 5, 5]), 1.0)


def test_two_class_weights():
    raw = np.array([0.8, 0.2]) ** -0.5
    np.testing.assert_allclose(raw, [1.118034, 2.236068], atol=1e-6)
    np.testing.assert_allclose(class_weights([80, 20]), [0.667, 1.333], atol=1e-3)
    np.testing.assert_allclose(class_weights([80, 20]), raw / raw.mean(), atol=1e-5)


def test_empty_class_weight_bounded():
    w = class_weights([10, 0, 10])
    raw = (np.array([0.5, 0.0, 0.5]) + 1e-6) ** -0.5
    np.testing.assert_allclose(w, raw / raw.mean())
    assert np.isfinite(w).all() and w.argmax() == 1
    assert w.mean() == pytest.approx(1.0)


def test_label_histogram():
    assert label_histogram(np.array([0, 2, 2]), 4).tolist() == [1, 0, 2, 0]


# ---------------------------------------------------------------------------
# seeding and full-batch Lloyd


def test_kmeans_pp_picks_distinct_points():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(c, 0.01, size=(20, 2)) for c in ([0, 0], [5, 5], [-5, 5])])
    seeds = kmeans_pp(x, 3, np.random.default_rng(1))
    near = ((seeds[:, None] - np.array([[0, 0], [5, 5], [-5, 5]])[None]) ** 2).sum(-1).argmin(1)
    assert sorted(near.tolist()) == [0, 1, 2]


def test_kmeans_pp_deterministic():
    x = np.random.default_rng(0).normal(size=(50, 3))
    a = kmeans_pp(x, 4, np.random.default_rng(7))
    b = kmeans_pp(x, 4, np.random.default_rng(7))
    assert np.array_equal(a, b)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_lloyd_monotone_and_constant_on_superpoints(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 80))
    f = rng.normal(size=(n, 2))
    sp = rng.integers(0, max(2, n // 3), n)
    k = int(rng.integers(1, 6))
    labels, mu, hist = lloyd(f, sp, f[rng.choice(n, k)], max_iter=50)
    assert all(b <= a + 1e-9 * max(1.0, abs(a)) for a, b in zip(hist, hist[1:]))
    for s in np.unique(sp):
        assert len(np.unique(labels[sp == s])) == 1
    assert objective(f, labels, mu) == pytest.approx(hist[-1])


def test_objective_example():
    f = np.array([[0.0, 0.0], [2.0, 0.0]])
    mu = np.array([[-0.1, 0.0], [1.9, 0.0]])
    assert objective(f, np.array([1, 1]), mu) == pytest.approx(3.62)
    best = min(objective(f, np.array(p), mu) for p in itertools.product([0, 1], repeat=2)
               if p[0] == p[1])
    assert best == pytest.approx(3.62)
