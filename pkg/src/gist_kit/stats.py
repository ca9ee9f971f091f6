"""Rank statistics: Kendall tau-b, quartiles, and best-first rank vectors.

The tau-b p-value policy is fixed: exact null distribution (all rank
permutations) when n <= 9 and both sequences are tie-free, otherwise a
normal approximation with tie-corrected variance and continuity correction.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import AllTied, TooFewSamples


@dataclass(frozen=True)
class KendallResult:
    tau: float
    p_value: float
    n: int
    method: str  # "exact" or "normal"


def kendall_tau_b(x, y) -> KendallResult:
    """Tau-b with tie correction and a two-sided p-value."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise TooFewSamples(f"need two equal-length vectors, got {x.shape} and {y.shape}")
    n = x.shape[0]
    if n < 3:
        raise TooFewSamples(f"need at least 3 samples, got {n}")

    conc = disc = 0
    for i in range(n):
        for j in range(i + 1, n):
            prod = np.sign(x[i] - x[j]) * np.sign(y[i] - y[j])
            if prod > 0:
                conc += 1
            elif prod < 0:
                disc += 1
    s = conc - disc
    n0 = n * (n - 1) // 2
    ties_x = [c for c in Counter(x.tolist()).values() if c > 1]
    ties_y = [c for c in Counter(y.tolist()).values() if c > 1]
    tx = sum(t * (t - 1) // 2 for t in ties_x)
    ty = sum(t * (t - 1) // 2 for t in ties_y)
    if n0 == tx or n0 == ty:
        raise AllTied("one of the vectors is entirely tied")
    tau = s / math.sqrt((n0 - tx) * (n0 - ty))

    if n <= 9 and not ties_x and not ties_y:
        p = _exact_p(n, abs(s))
        method = "exact"
    else:
        p = _normal_p(n, s, ties_x, ties_y)
        method = "normal"
    return KendallResult(tau=float(tau), p_value=float(min(max(p, 0.0), 1.0)), n=n, method=method)


def _exact_p(n: int, s_abs: int) -> float:
    """P(|S| >= s_abs) under uniform rank permutations, via the inversion
    count distribution: the coefficients of prod_i (1 + z + ... + z^(i-1))."""
    counts = [1]
    for i in range(2, n + 1):
        prev = counts
        width = len(prev) + i - 1
        acc = [0] * width
        run = 0.0
        # convolution with a length-i block of ones via a sliding sum
        for d in range(width):
            run += prev[d] if d < len(prev) else 0
            if d - i >= 0:
                run -= prev[d - i]
            acc[d] = run
        counts = acc
    n0 = n * (n - 1) // 2
    total = math.factorial(n)
    hits = sum(c for d, c in enumerate(counts) if abs(n0 - 2 * d) >= s_abs)
    return hits / total


def _normal_p(n: int, s: int, ties_x, ties_y) -> float:
    def tie_term(ties, fn):
        return sum(fn(t) for t in ties)

    v0 = n * (n - 1) * (2 * n + 5)
    vx = tie_term(ties_x, lambda t: t * (t - 1) * (2 * t + 5))
    vy = tie_term(ties_y, lambda t: t * (t - 1) * (2 * t + 5))
    var = (v0 - vx - vy) / 18.0
    if n > 2:
        v1x = tie_term(ties_x, lambda t: t * (t - 1) * (t - 2))
        v1y = tie_term(ties_y, lambda t: t * (t - 1) * (t - 2))
        var += v1x * v1y / (9.0 * n * (n - 1) * (n - 2))
    v2x = tie_term(ties_x, lambda t: t * (t - 1))
    v2y = tie_term(ties_y, lambda t: t * (t - 1))
    var += v2x * v2y / (2.0 * n * (n - 1))
    if var <= 0:
        return 1.0
    z = max(abs(s) - 1.0, 0.0) / math.sqrt(var)  # continuity correction
    return math.erfc(z / math.sqrt(2.0))


def quartiles(values) -> tuple[float, float, float]:
    """(q1, median, q3) with linear interpolation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise TooFewSamples("no values to take quartiles of")
    q1, q2, q3 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
    return float(q1), float(q2), float(q3)


def rank_vector(values, higher_is_better: bool = True) -> np.ndarray:
    """Rank 1 = best; tied values share the mean of their rank positions."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise TooFewSamples("no values to rank")
    key = -v if higher_is_better else v
    order = np.argsort(key, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and key[order[j + 1]] == key[order[i]]:
            j += 1
        mean_rank = (i + j) / 2.0 + 1.0
        for t in range(i, j + 1):
            ranks[order[t]] = mean_rank
        i = j + 1
    return ranks
