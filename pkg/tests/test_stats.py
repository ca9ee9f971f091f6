"""Kendall tau-b, its p-value policy, quartiles, and rank vectors."""

import numpy as np
import pytest

from gist_kit.errors import AllTied, TooFewSamples
from gist_kit.stats import kendall_tau_b, quartiles, rank_vector
from oracles import kendall_exact_p_oracle, kendall_oracle


def test_perfect_agreement():
    r = kendall_tau_b([1, 2, 3], [1, 2, 3])
    assert r.tau == 1.0
    assert r.method == "exact"
    assert r.p_value == pytest.approx(1 / 3)


def test_perfect_reversal():
    r = kendall_tau_b([1, 2, 3], [3, 2, 1])
    assert r.tau == -1.0
    assert r.p_value == pytest.approx(1 / 3)


def test_tied_example():
    r = kendall_tau_b([1, 1, 2], [1, 2, 2])
    assert r.tau == pytest.approx(0.5)
    assert r.method == "normal"  # ties force the approximation


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(31)
    for trial in range(200):
        n = int(rng.integers(3, 13))
        if trial % 2:
            x = rng.integers(0, 5, size=n).astype(float)  # ties likely
            y = rng.integers(0, 5, size=n).astype(float)
        else:
            x = rng.normal(size=n)
            y = rng.normal(size=n)
        expected = kendall_oracle(x, y)
        if expected is None:
            with pytest.raises(AllTied):
                kendall_tau_b(x, y)
            continue
        r = kendall_tau_b(x, y)
        assert r.tau == pytest.approx(expected, abs=1e-12)
        assert 0.0 <= r.p_value <= 1.0


def test_exact_p_matches_enumeration():
    rng = np.random.default_rng(32)
    for _ in range(20):
        n = int(rng.integers(3, 7))
        x = rng.permutation(n).astype(float)
        y = rng.permutation(n).astype(float)
        r = kendall_tau_b(x, y)
        assert r.method == "exact"
        assert r.p_value == pytest.approx(kendall_exact_p_oracle(x, y), abs=1e-12)


def test_exact_only_below_ten_samples():
    x = np.arange(10, dtype=float)
    assert kendall_tau_b(x, x).method == "normal"
    assert kendall_tau_b(x[:9], x[:9]).method == "exact"


def test_monotone_transform_invariance():
    rng = np.random.default_rng(33)
    x = rng.normal(size=8)
    y = rng.normal(size=8)
    a = kendall_tau_b(x, y)
    b = kendall_tau_b(x, np.exp(y))
    assert a.tau == b.tau
    assert a.p_value == b.p_value


def test_strong_correlation_small_p():
    x = np.arange(30, dtype=float)
    r = kendall_tau_b(x, x + 0.01 * np.random.default_rng(0).normal(size=30))
    assert r.tau > 0.9
    assert r.p_value < 1e-6


def test_all_tied_raises():
    with pytest.raises(AllTied):
        kendall_tau_b([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


def test_too_few_samples():
    with pytest.raises(TooFewSamples):
        kendall_tau_b([1.0, 2.0], [1.0, 2.0])


def test_quartiles_odd():
    assert quartiles([1, 2, 3, 4, 5]) == (2.0, 3.0, 4.0)


def test_quartiles_interpolates():
    q1, q2, q3 = quartiles([1, 2, 3, 4])
    assert (q1, q2, q3) == (1.75, 2.5, 3.25)


def test_quartiles_empty():
    with pytest.raises(TooFewSamples):
        quartiles([])


def test_rank_vector_higher_better():
    ranks = rank_vector([0.3, 0.1, 0.3])
    assert ranks.tolist() == [1.5, 3.0, 1.5]


def test_rank_vector_lower_better():
    ranks = rank_vector([0.3, 0.1, 0.5], higher_is_better=False)
    assert ranks.tolist() == [2.0, 1.0, 3.0]


def test_rank_vector_all_tied_mean():
    ranks = rank_vector([2.0, 2.0, 2.0, 2.0])
    assert ranks.tolist() == [2.5, 2.5, 2.5, 2.5]
