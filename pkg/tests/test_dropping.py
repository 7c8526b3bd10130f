from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapt import numerics as nx
from adapt.dropping import (
    DropDecision,
    DropPredictorParams,
    ablation_select,
    default_placement,
    drop_loss,
    drop_loss_values,
    drop_targets,
    gumbel_softmax_st,
    kept_count,
    predict_keep_logits,
    select_inference,
    select_threshold,
    soft_drop_fraction,
    top_m,
)
from adapt.numerics import RandomSource, Tensor
from adapt.pointcloud import ConfigError

# published target table, rows b = 1..4, columns i = 1..4
TARGET_TABLE = [
    [0.20, 0.40, 0.60, 0.80],
    [0.13, 0.27, 0.40, 0.53],
    [0.07, 0.13, 0.20, 0.27],
    [0.00, 0.00, 0.00, 0.00],
]


def test_targets_reproduce_table():
    sched = drop_targets(4, 0.8, 4)
    for b in range(1, 5):
        assert [round(float(t), 2) for t in sched.exact_row(b)] == TARGET_TABLE[b - 1]
    assert sched.exact_row(1) == [Fraction(1, 5), Fraction(2, 5), Fraction(3, 5), Fraction(4, 5)]
    assert sched.exact_row(3)[2] == Fraction(1, 5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(2, 6), st.fractions(0, Fraction(99, 100)))
def test_targets_monotone(ell, budgets, rho):
    sched = drop_targets(ell, rho, budgets)
    for b in range(1, budgets + 1):
        row = sched.exact_row(b)
        assert all(x <= y for x, y in zip(row, row[1:]))
        assert row[-1] == Fraction(budgets - b, budgets - 1) * rho
    for i in range(ell):
        col = [sched.exact_row(b)[i] for b in range(1, budgets + 1)]
        assert all(x >= y for x, y in zip(col, col[1:]))
    assert all(t == 0 for t in sched.exact_row(budgets))


def test_kept_counts_at_2048():
    assert drop_targets(4, 0.8, 4).kept_counts(1, 2048) == [1638, 1229, 819, 410]
    # exact rational rounding: (1 - 0.2) * 2048 = 1638.4, half rounds up
    assert kept_count(Fraction(1, 2), 5) == 3
    assert kept_count(0, 7) == 7


def test_schedule_validation_and_budget_errors():
    with pytest.raises(ConfigError, match="rho"):
        drop_targets(4, 1.0, 4)
    with pytest.raises(ConfigError):
        drop_targets(4, 0.8, 1)
    sched = drop_targets(4, 0.8, 4)
    with pytest.raises(ConfigError, match="valid budgets: 1, 2, 3, 4"):
        sched.row(5)
    with pytest.raises(ConfigError):
        sched.row(0)


@pytest.mark.parametrize("n, ell, expected", [(8, 4, [2, 4, 6, 7]), (4, 4, [0, 1, 2, 3]), (12, 3, [4, 8, 11]),
                                              (5, 1, [4])])
def test_default_placement(n, ell, expected):
    assert default_placement(n, ell) == expected


def test_placement_rejects_too_many_slots():
    with pytest.raises(ConfigError):
        default_placement(3, 4)


def test_gumbel_st_forward_is_exact_onehot():
    logits = Tensor(np.random.default_rng(0).normal(size=(3, 50, 2)), requires_grad=True)
    onehot, soft = gumbel_softmax_st(logits, 1.0, RandomSource(0, 2))
    assert set(np.unique(onehot.data)) <= {0.0, 1.0}
    assert np.all(onehot.data.sum(axis=-1) == 1.0)
    assert np.array_equal(onehot.data[..., 1] == 1, soft.data[..., 1] > soft.data[..., 0])


def test_gumbel_st_gradient_is_soft_gradient():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 2))
    noise = nx.gumbel_from_uniform(rng.uniform(size=x.shape))
    w = rng.normal(size=x.shape)
    a = Tensor(x, requires_grad=True)
    onehot, _ = gumbel_softmax_st(a, 0.7, noise=noise)
    nx.backward(nx.sum_(onehot * Tensor(w)))
    b = Tensor(x, requires_grad=True)
    soft = nx.softmax((nx.log_softmax(b) + Tensor(noise)) * (1 / 0.7))
    nx.backward(nx.sum_(soft * Tensor(w)))
    np.testing.assert_allclose(a.grad, b.grad, rtol=1e-12)


def test_gumbel_st_keep_frequency():
    pi = np.array([0.3, 0.7])
    logits = Tensor(np.tile(np.log(pi), (100_000, 1)))
    onehot, _ = gumbel_softmax_st(logits, 1.0, RandomSource(4, 2))
    assert onehot.data[:, 1].mean() == pytest.approx(0.7, abs=0.01)


def test_gumbel_st_rejects_bad_tau():
    with pytest.raises(ValueError):
        gumbel_softmax_st(Tensor(np.zeros((1, 2))), 0.0, RandomSource(0))


def test_soft_drop_fraction_and_loss():
    probs = Tensor(np.array([[0.5, 1.0, 0.0, 0.5]]))
    prev = Tensor(np.array([[1.0, 1.0, 0.0, 0.0]]))
    d = soft_drop_fraction(probs, prev, 4)
    np.testing.assert_allclose(d.data, [1 - 1.5 / 4])
    dec = DropDecision(probs, prev, None, d, 4)
    loss = drop_loss([dec, dec], [0.5, 0.625])
    assert loss.item() == pytest.approx(((0.625 - 0.5) ** 2 + 0) / 2)
    assert drop_loss_values([0.625, 0.625], [0.5, 0.625]) == pytest.approx(loss.item())
    np.testing.assert_allclose(dec.dropped_fraction, [0.5])


def test_predictor_global_feature_ignores_dead_tokens():
    rng = np.random.default_rng(2)
    p = DropPredictorParams(8, RandomSource(0, 5), np.float64)
    x = rng.normal(size=(1, 6, 8))
    keep = np.array([[1, 1, 0, 1, 0, 1.0]])
    y = x.copy()
    y[0, keep[0] == 0] += 50.0
    a = predict_keep_logits(Tensor(x), keep, p).data
    b = predict_keep_logits(Tensor(y), keep, p).data
    live = keep[0] > 0
    np.testing.assert_allclose(a[0, live], b[0, live], rtol=1e-12)
    assert a.shape == (1, 6, 2)


def test_predictor_with_full_mask_equals_no_mask():
    p = DropPredictorParams(8, RandomSource(0, 5), np.float64)
    x = Tensor(np.random.default_rng(3).normal(size=(2, 5, 8)))
    np.testing.assert_allclose(predict_keep_logits(x, None, p).data,
                               predict_keep_logits(x, np.ones((2, 5)), p).data, rtol=1e-12)


def test_top_m_ties_to_lower_index():
    assert top_m(np.array([0.5, 0.9, 0.5, 0.5, 0.1]), 3).tolist() == [0, 1, 2]
    assert top_m(np.array([[1.0, 2.0, 3.0], [3.0, 3.0, 3.0]]), 2).tolist() == [[1, 2], [0, 1]]


def test_select_inference_exact_count_within_alive():
    probs = np.array([0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05])
    alive = np.array([0, 1, 1, 1, 1, 1, 1, 1, 1, 1], dtype=bool)
    keep = select_inference(probs, alive, Fraction(1, 2), 10)
    assert keep.sum() == 5 and not keep[0]
    assert np.flatnonzero(keep).tolist() == [1, 2, 3, 4, 5]
    with pytest.raises(ValueError, match="alive"):
        select_inference(probs, np.eye(10, dtype=bool)[0], Fraction(1, 2), 10)


def test_select_threshold():
    keep = select_threshold(np.array([0.6, 0.4, 0.9, 0.51]), np.array([1, 1, 0, 1], dtype=bool))
    assert keep.tolist() == [True, False, False, True]


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 40), st.integers(0, 2**31 - 1), st.sampled_from(["random", "farthest_point"]))
def test_ablation_matches_count_and_stays_alive(n, seed, strategy):
    rng = np.random.default_rng(seed)
    alive = rng.uniform(size=n) < 0.7
    alive[0] = True
    t = Fraction(int(rng.integers(0, 5)), 10)
    m = kept_count(t, n)
    if m > alive.sum():
        return
    keep = ablation_select(strategy, alive, t, n, rng.normal(size=(n, 3)), RandomSource(seed, 5))
    assert keep.sum() == m
    assert not np.any(keep & ~alive)


def test_fps_ablation_starts_at_lowest_alive():
    pos = np.array([[0, 0, 0], [5, 0, 0], [0.1, 0, 0], [1, 0, 0]], dtype=float)
    alive = np.array([False, True, True, True])
    keep = ablation_select("fps", alive, Fraction(1, 2), 4, pos, RandomSource(0))
    assert np.flatnonzero(keep).tolist() == [1, 2]
    with pytest.raises(ConfigError):
        ablation_select("median", alive, 0, 4, pos, RandomSource(0))
