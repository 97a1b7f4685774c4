import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from jointspo import crf


def rand_instance(rng, K, N, scale=2.0):
    e = rng.normal(0, scale, size=(K, N))
    t = rng.normal(0, scale, size=(N, N))
    return e, t


def T(x):
    return torch.tensor(x, dtype=torch.float64)


def test_log_partition_examples():
    assert float(crf.log_partition(T([[0.0, 0.0]]), T(np.zeros((2, 2))))) == pytest.approx(math.log(2), abs=1e-12)
    assert float(crf.log_partition(T(np.zeros((2, 2))), T(np.zeros((2, 2))))) == pytest.approx(math.log(4), abs=1e-12)


def test_log_partition_matches_enumeration():
    rng = np.random.default_rng(0)
    e, t = rand_instance(rng, 5, 4)
    assert float(crf.log_partition(T(e), T(t))) == pytest.approx(crf.enumerate_log_partition(e, t), abs=1e-8)


def test_empty_sequence():
    with pytest.raises(crf.EmptySequenceError):
        crf.log_partition(T(np.zeros((0, 2))), T(np.zeros((2, 2))))


def test_nll_examples():
    assert float(crf.nll(T([[0.0, 0.0]]), T(np.zeros((2, 2))), torch.tensor([0]))) == pytest.approx(math.log(2))
    rng = np.random.default_rng(1)
    y = [2, 0, 1, 1]
    e = np.zeros((4, 3))
    e[range(4), y] = 50.0
    assert float(crf.nll(T(e), T(rng.normal(size=(3, 3))), torch.tensor(y))) < 1e-6


def test_nll_matches_enumerated_probability():
    rng = np.random.default_rng(2)
    e, t = rand_instance(rng, 4, 3)
    dist = crf.enumerate_distribution(e, t)
    y = (1, 2, 0, 2)
    assert float(crf.nll(T(e), T(t), torch.tensor(y))) == pytest.approx(-math.log(dist[y]), abs=1e-8)


def test_nll_length_mismatch():
    with pytest.raises(ValueError):
        crf.nll(T(np.zeros((3, 2))), T(np.zeros((2, 2))), torch.tensor([0, 1]))


def test_viterbi_examples():
    assert crf.viterbi(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros((2, 2))) == [0, 1]
    assert crf.viterbi(np.zeros((5, 3)), np.zeros((3, 3))) == [0] * 5


def test_viterbi_matches_enumeration():
    rng = np.random.default_rng(3)
    e, t = rand_instance(rng, 6, 4)
    best = max(crf.score_numpy(e, t, y) for y in itertools.product(range(4), repeat=6))
    assert crf.score_numpy(e, t, crf.viterbi(e, t)) == pytest.approx(best, abs=1e-10)


def test_enumerate_distribution():
    d = crf.enumerate_distribution(np.zeros((1, 2)), np.zeros((2, 2)))
    assert d == {(0,): 0.5, (1,): 0.5}
    rng = np.random.default_rng(4)
    e, t = rand_instance(rng, 4, 3)
    d = crf.enumerate_distribution(e, t)
    assert sum(d.values()) == pytest.approx(1.0, abs=1e-10)
    top = max(d, key=d.get)
    assert crf.score_numpy(e, t, top) == pytest.approx(crf.score_numpy(e, t, crf.viterbi(e, t)), abs=1e-10)
    with pytest.raises(ValueError, match="enumeration limit"):
        crf.enumerate_distribution(np.zeros((11, 4)), np.zeros((4, 4)))


@settings(max_examples=60)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_oracle_equivalence(K, N, seed):
    rng = np.random.default_rng(seed)
    e, t = rand_instance(rng, K, N)
    z = crf.enumerate_log_partition(e, t)
    assert float(crf.log_partition(T(e), T(t))) == pytest.approx(z, abs=1e-8)
    y = tuple(rng.integers(0, N, size=K))
    assert float(crf.nll(T(e), T(t), torch.tensor(y))) == pytest.approx(z - crf.score_numpy(e, t, y), abs=1e-8)
    best = max(crf.score_numpy(e, t, p) for p in itertools.product(range(N), repeat=K))
    assert crf.score_numpy(e, t, crf.viterbi(e, t)) == pytest.approx(best, abs=1e-9)


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    e0, t0 = rand_instance(rng, 5, 3, scale=1.0)
    y = torch.tensor([0, 2, 1, 1, 0])
    e, t = T(e0).requires_grad_(), T(t0).requires_grad_()
    crf.nll(e, t, y).backward()

    def f(ev, tv):
        return float(crf.nll(T(ev), T(tv), y))

    eps = 1e-4
    for arr, grad, is_e in ((e0, e.grad.numpy(), True), (t0, t.grad.numpy(), False)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += eps
            minus[idx] -= eps
            num[idx] = ((f(plus, t0) - f(minus, t0)) if is_e else (f(e0, plus) - f(e0, minus))) / (2 * eps)
        assert _rel_err(grad, num).max() < 1e-4


def test_shift_invariance():
    rng = np.random.default_rng(6)
    e, t = rand_instance(rng, 5, 4)
    shifted = e.copy()
    shifted[2] += 3.7
    assert float(crf.log_partition(T(shifted), T(t)) - crf.log_partition(T(e), T(t))) == pytest.approx(3.7, abs=1e-10)
    assert crf.viterbi(shifted, t) == crf.viterbi(e, t)


@settings(max_examples=50)
@given(st.integers(0, 2 ** 31))
def test_nll_nonnegative(seed):
    rng = np.random.default_rng(seed)
    K, N = rng.integers(1, 8), rng.integers(2, 5)
    e, t = rand_instance(rng, K, N, scale=5.0)
    y = torch.tensor(rng.integers(0, N, size=K))
    assert float(crf.nll(T(e), T(t), y)) >= 0.0


def test_batched_matches_single():
    rng = np.random.default_rng(7)
    t = rng.normal(size=(3, 3))
    seqs = [rng.normal(size=(L, 3)) for L in (4, 2, 5)]
    tags = [rng.integers(0, 3, size=len(s)) for s in seqs]
    E = np.zeros((3, 5, 3))
    Y = np.zeros((3, 5), dtype=np.int64)
    M = np.zeros((3, 5), dtype=bool)
    for b, (s, y) in enumerate(zip(seqs, tags)):
        E[b, :len(s)], Y[b, :len(s)], M[b, :len(s)] = s, y, True
    batched = crf.nll(T(E), T(t), torch.tensor(Y), torch.tensor(M))
    paths = crf.viterbi(E, t, M)
    for b, (s, y) in enumerate(zip(seqs, tags)):
        assert float(batched[b]) == pytest.approx(float(crf.nll(T(s), T(t), torch.tensor(y))), abs=1e-10)
        assert paths[b] == crf.viterbi(s, t)
