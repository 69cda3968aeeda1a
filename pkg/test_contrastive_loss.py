#!/usr/bin/env python3
"""
Tests for the weighted InfoNCE loss and its gradients
"""

import math

import numpy as np
import pytest

from contrastive_loss import (
    LossBatch,
    finite_diff_gradient,
    info_nce_gradient,
    info_nce_loss,
    log_phi,
    phi,
)
from core_model import InputFormatError, PreconditionError


def naive_loss(queries, positives, negatives, tau, exclude_diagonal=False):
    """Straight double loop over Python floats with exactly rounded sums."""
    def cos(a, b):
        dot = math.fsum(x * y for x, y in zip(a, b))
        return dot / (math.sqrt(math.fsum(x * x for x in a)) * math.sqrt(math.fsum(y * y for y in b)))

    def log_sum_exp(values):
        top = max(values)
        return top + math.log(math.fsum(math.exp(v - top) for v in values))

    losses = []
    for i, q in enumerate(queries):
        vecs, weights = negatives[i]
        terms = [math.log(w / len(weights)) + cos(q, v) / tau for v, w in zip(vecs, weights)]
        terms += [cos(q, t) / tau for j, t in enumerate(positives) if not (exclude_diagonal and j == i)]
        losses.append(log_sum_exp(terms) - cos(q, positives[i]) / tau)
    return math.fsum(losses) / len(queries)


def random_batch(rng, n, d, k_max, tau, unit=True, norms=None):
    def rows(count):
        r = rng.normal(size=(count, d))
        if not unit and norms is None:
            return r
        r = r / np.linalg.norm(r, axis=1, keepdims=True)
        return r * rng.uniform(*norms, size=(count, 1)) if norms else r
    groups = []
    for _ in range(n):
        k = int(rng.integers(0, k_max + 1))
        groups.append((rows(k), rng.uniform(0.2, 2.0, size=k)))
    return LossBatch(rows(n), rows(n), tuple(groups), tau)


def _naive_from_batch(batch):
    negatives = [(vecs.tolist(), weights.tolist()) for vecs, weights in batch.hard_negatives]
    return naive_loss(batch.query_vecs.tolist(), batch.positive_vecs.tolist(), negatives, batch.tau,
                      batch.exclude_diagonal)


def test_single_pair_loss_is_zero():
    batch = LossBatch([[0.6, 0.8]], [[1.0, 0.0]], ((np.zeros((0, 2)), np.zeros(0)),), 0.02)
    assert info_nce_loss(batch) == 0.0
    grads = info_nce_gradient(batch)
    assert np.all(grads.flat() == 0.0)
    assert np.max(np.abs(finite_diff_gradient(batch).flat())) <= 1e-5


def test_two_identical_pairs_give_ln2():
    v = [[1.0, 0.0, 0.0]] * 2
    batch = LossBatch(v, v, ((np.zeros((0, 3)), np.zeros(0)),) * 2, 0.02)
    assert abs(info_nce_loss(batch) - math.log(2)) <= 1e-12
    grads = info_nce_gradient(batch)
    assert np.allclose(grads.queries[0], grads.queries[1])


def test_loss_matches_naive_oracle():
    rng = np.random.default_rng(0)
    for trial in range(100):
        tau = 0.02 if trial % 4 == 0 else float(rng.uniform(0.02, 1.0))
        batch = random_batch(rng, n=int(rng.integers(1, 9)), d=int(rng.integers(2, 17)), k_max=3, tau=tau,
                             unit=trial % 2 == 0)
        loss = info_nce_loss(batch)
        expected = _naive_from_batch(batch)
        assert loss >= 0.0
        assert abs(loss - expected) <= 1e-10 * max(1.0, abs(expected))


def test_exclude_diagonal_matches_oracle():
    rng = np.random.default_rng(1)
    batch = random_batch(rng, n=4, d=8, k_max=2, tau=0.1)
    batch = LossBatch(batch.query_vecs, batch.positive_vecs, batch.hard_negatives, 0.1, exclude_diagonal=True)
    assert info_nce_loss(batch) == pytest.approx(_naive_from_batch(batch), rel=1e-10)
    lonely = LossBatch([[1.0, 0.0]], [[1.0, 0.0]], ((np.zeros((0, 2)), np.zeros(0)),), 0.1,
                       exclude_diagonal=True)
    with pytest.raises(InputFormatError):
        info_nce_loss(lonely)


def test_extreme_cosines_stay_finite():
    e1, e2 = [1.0, 0.0], [0.0, 1.0]
    negatives = ((np.array([[1.0, 0.0]]), np.array([1.0])), (np.array([[-1.0, 0.0]]), np.array([0.5])))
    batch = LossBatch([e1, e2], [[-1.0, 0.0], e2], negatives, 0.02)
    loss = info_nce_loss(batch)
    assert math.isfinite(loss)
    assert loss == pytest.approx(_naive_from_batch(batch), rel=1e-10)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(100):
        batch = random_batch(rng, n=int(rng.integers(1, 7)), d=int(rng.integers(2, 9)), k_max=3,
                             tau=float(rng.uniform(0.05, 0.5)), norms=(0.5, 2.0))
        analytic = info_nce_gradient(batch).flat()
        numeric = finite_diff_gradient(batch, step=1e-5).flat()
        tolerance = 1e-4 * np.maximum(np.abs(analytic), np.abs(numeric)) + 1e-6
        assert np.all(np.abs(analytic - numeric) <= tolerance)


def test_finite_differences_converge_quadratically():
    rng = np.random.default_rng(3)
    batch = random_batch(rng, n=3, d=4, k_max=2, tau=1.0, unit=False)
    analytic = info_nce_gradient(batch).flat()
    coarse = np.max(np.abs(finite_diff_gradient(batch, step=1e-2).flat() - analytic))
    fine = np.max(np.abs(finite_diff_gradient(batch, step=5e-3).flat() - analytic))
    assert 3.0 <= coarse / fine <= 5.0


def test_free_gradient_is_the_unprojected_form():
    rng = np.random.default_rng(4)
    batch = random_batch(rng, n=4, d=6, k_max=2, tau=0.2)
    through = info_nce_gradient(batch)
    free = info_nce_gradient(batch, through_normalization=False)
    for x, g_free, g_through in zip(batch.query_vecs, free.queries, through.queries):
        assert np.allclose(g_free - np.dot(g_free, x) * x, g_through, atol=1e-12)


def _angle_batch(pos_angle, neg_angle, tau=0.1):
    def at(theta):
        return [math.cos(theta), math.sin(theta)]
    return LossBatch([at(0.0), at(2.0)], [at(pos_angle), at(2.5)],
                     ((np.array([at(neg_angle)]), np.array([1.0])), (np.zeros((0, 2)), np.zeros(0))), tau)


def test_loss_moves_the_right_way():
    assert info_nce_loss(_angle_batch(0.2, 1.0)) < info_nce_loss(_angle_batch(0.6, 1.0))
    assert info_nce_loss(_angle_batch(0.4, 0.8)) > info_nce_loss(_angle_batch(0.4, 1.4))


def test_phi():
    assert phi([1.0, 0.0], [0.0, 1.0], 0.02) == 1.0
    assert log_phi([1.0, 0.0], [1.0, 0.0], 0.02) == 50.0
    a, b = np.array([0.3, 0.4, 0.5]), np.array([0.1, -0.2, 0.7])
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    assert phi(a, b, 0.1) == pytest.approx(math.exp(cos / 0.1), rel=1e-12)
    with pytest.raises(PreconditionError):
        phi(a, b, 0.0)


def test_batch_validation():
    ok_group = (np.array([[1.0, 0.0]]), np.array([1.0]))
    with pytest.raises(InputFormatError):
        LossBatch([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], (ok_group,), 0.1)
    with pytest.raises(InputFormatError):
        LossBatch([[1.0, 0.0]], [[1.0, 0.0]], ((np.array([[1.0, 0.0]]), np.array([0.0])),), 0.1)
    with pytest.raises(InputFormatError):
        LossBatch([[1.0, 0.0]], [[1.0, 0.0]], (ok_group,), 0.0)
    with pytest.raises(InputFormatError):
        LossBatch([[0.0, 0.0]], [[1.0, 0.0]], (ok_group,), 0.1)
    batch = LossBatch.from_pairs([[1.0, 0.0]], [[0.0, 1.0]], [[(np.array([1.0, 1.0]), 2.0)]], 0.5)
    assert batch.size == 1 and batch.hard_negatives[0][1].tolist() == [2.0]


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
