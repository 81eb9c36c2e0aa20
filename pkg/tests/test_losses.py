import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mutual_eend.losses import TooManySpeakersError, best_permutation, bce_pit, kd_pit
from mutual_eend.tensor import Tensor, check_gradients, precision


def bce_oracle(y, labels):
    """Brute force: mean BCE of every row assignment."""
    s = y.shape[0]
    costs = {}
    for perm in itertools.permutations(range(s)):
        total = 0.0
        for i in range(s):
            p = np.clip(y[perm[i]], 1e-7, 1 - 1e-7)
            total += float(np.sum(-(labels[i] * np.log(p) + (1 - labels[i]) * np.log(1 - p))))
        costs[perm] = total / y.size
    return costs


def kd_oracle(teacher, student):
    s = teacher.shape[0]
    return {perm: sum(float(np.sum((teacher[i] - student[perm[i]]) ** 2))
                      for i in range(s)) / teacher.size
            for perm in itertools.permutations(range(s))}


def assert_matches_oracle(res, costs):
    """Minimum equal; the chosen assignment is a minimizer, and the only one
    when the minimum is unique (tied costs differ only by rounding)."""
    want = min(costs.values())
    minimizers = [p for p, c in costs.items() if c == pytest.approx(want, rel=1e-12)]
    assert res.loss_value == pytest.approx(want, rel=1e-12, abs=1e-15)
    assert res.best_perm in minimizers
    if len(minimizers) == 1:
        assert res.best_perm == minimizers[0]


@pytest.mark.parametrize("seed", range(100))
def test_bce_pit_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    s = 2 + seed % 2
    t = int(rng.integers(1, 12))
    y = rng.uniform(0, 1, (s, t))
    labels = rng.integers(0, 2, (s, t)).astype(float)
    with precision("float64"):
        res = bce_pit(Tensor(y), labels)
    assert_matches_oracle(res, bce_oracle(y, labels))


@pytest.mark.parametrize("seed", range(100))
def test_kd_pit_matches_brute_force(seed):
    rng = np.random.default_rng(1000 + seed)
    s = 2 + seed % 2
    t = int(rng.integers(1, 12))
    teacher, student = rng.standard_normal((s, t)), rng.standard_normal((s, t))
    with precision("float64"):
        res = kd_pit(teacher, Tensor(student))
    assert_matches_oracle(res, kd_oracle(teacher, student))


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([1, 2, 3, 4]), st.integers(1, 10), st.integers(0, 2 ** 31 - 1))
def test_kd_pit_zero_under_row_permutation(s, t, seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((s, t))
    with precision("float64"):
        for perm in itertools.permutations(range(s)):
            assert kd_pit(z, Tensor(z[list(perm)])).loss_value == 0.0


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([2, 3]), st.integers(1, 10), st.integers(0, 2 ** 31 - 1))
def test_bce_label_permutation_invariance(s, t, seed):
    rng = np.random.default_rng(seed)
    y = rng.uniform(0.01, 0.99, (s, t))
    labels = rng.integers(0, 2, (s, t))
    with precision("float64"):
        base = bce_pit(Tensor(y), labels).loss_value
        for perm in itertools.permutations(range(s)):
            # the search absorbs the reordering; sums may reassociate by an ulp
            assert bce_pit(Tensor(y), labels[list(perm)]).loss_value == pytest.approx(
                base, rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([2, 3]), st.integers(1, 10), st.integers(0, 2 ** 31 - 1))
def test_kd_symmetric_and_nonnegative(s, t, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((s, t)), rng.standard_normal((s, t))
    perm = list(rng.permutation(s))
    with precision("float64"):
        base = kd_pit(a, Tensor(b)).loss_value
        both = kd_pit(a[perm], Tensor(b[perm])).loss_value
    assert base >= 0
    assert both == pytest.approx(base, rel=1e-14)


def test_kd_hand_example():
    with precision("float64"):
        res = kd_pit(np.eye(2), Tensor(np.zeros((2, 2))))
    assert res.loss_value == 0.5


def test_bce_perfect_prediction_is_tiny():
    labels = np.array([[1, 0, 1], [0, 0, 1]], dtype=float)
    with precision("float64"):
        res = bce_pit(Tensor(labels), labels)
        swapped = bce_pit(Tensor(labels[::-1].copy()), labels)
    eps = 1e-7
    assert res.loss_value <= 2 * eps * math.log(1 / eps)
    assert swapped.loss_value == res.loss_value
    assert swapped.best_perm == (1, 0)


def test_two_by_three_direct_oracle():
    y = np.array([[0.9, 0.2, 0.6], [0.3, 0.7, 0.1]])
    labels = np.array([[0, 1, 0], [1, 0, 1]], dtype=float)

    def mean_bce(p, q):
        return -np.mean(q * np.log(p) + (1 - q) * np.log(1 - p))

    identity = mean_bce(y, labels)
    swap = mean_bce(y[::-1], labels)
    with precision("float64"):
        got = bce_pit(Tensor(y), labels).loss_value
    assert got == pytest.approx(min(identity, swap), rel=1e-12)


def test_best_permutation_examples():
    assert best_permutation(np.array([[3.0]])) == (0,)
    cost = np.full((3, 3), 5.0) - 4 * np.eye(3)
    assert best_permutation(cost) == (0, 1, 2)
    assert best_permutation(np.zeros((3, 3))) == (0, 1, 2)  # ties: lexicographic
    assert best_permutation(np.full((2, 2), np.nan)) == (0, 1)
    with pytest.raises(TooManySpeakersError):
        best_permutation(np.zeros((9, 9)))


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradients_with_frozen_permutation(seed):
    rng = np.random.default_rng(seed)
    with precision("float64"):
        y = Tensor.param(rng.uniform(0.05, 0.95, (2, 3, 6)))
        labels = rng.integers(0, 2, (2, 3, 6))
        errs = check_gradients(lambda: bce_pit(y, labels).loss, [y])
        z = Tensor.param(rng.standard_normal((2, 3, 6)))
        teacher = rng.standard_normal((2, 3, 6))
        errs.update({"kd": check_gradients(lambda: kd_pit(teacher, z).loss, [z])[0]})
    assert max(errs.values()) <= 1e-4


def test_batched_loss_is_mean_of_samples():
    rng = np.random.default_rng(0)
    y = rng.uniform(0.05, 0.95, (3, 2, 5))
    labels = rng.integers(0, 2, (3, 2, 5))
    with precision("float64"):
        batched = bce_pit(Tensor(y), labels)
        singles = [bce_pit(Tensor(y[b]), labels[b]) for b in range(3)]
    assert batched.loss_value == pytest.approx(np.mean([s.loss_value for s in singles]))
    assert batched.best_perm == [s.best_perm for s in singles]
