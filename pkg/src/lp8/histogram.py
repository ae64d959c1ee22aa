"""Octave histograms of tensor magnitudes and format coverage.

Bin ``k`` of a histogram counts the values with ``floor(log2|x|) ==
bin_offset + k``; zeros are counted separately. Comparing the occupied
octaves with a format's representable range gives the coverage numbers used
to pick an exponent bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .formats import FloatFormat

__all__ = [
    "EmptyHistogramError",
    "ExponentHistogram",
    "Coverage",
    "exponent_histogram",
    "merge",
    "coverage",
    "strict_overflow",
    "suggest_bias",
]


class EmptyHistogramError(ValueError):
    pass


@dataclass(frozen=True)
class ExponentHistogram:
    bin_offset: int
    counts: np.ndarray
    zero_count: int

    @property
    def total(self) -> int:
        return self.zero_count + int(self.counts.sum())

    @property
    def nonzero(self) -> int:
        return int(self.counts.sum())

    @property
    def exponents(self) -> np.ndarray:
        return self.bin_offset + np.arange(len(self.counts))

    def count_at(self, exponent: int) -> int:
        k = exponent - self.bin_offset
        return int(self.counts[k]) if 0 <= k < len(self.counts) else 0

    def __add__(self, other: "ExponentHistogram") -> "ExponentHistogram":
        return merge(self, other)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ExponentHistogram):
            return NotImplemented
        a, b = _trim(self), _trim(other)
        return a.zero_count == b.zero_count and a.bin_offset == b.bin_offset and np.array_equal(a.counts, b.counts)


def _trim(h: ExponentHistogram) -> ExponentHistogram:
    nz = np.flatnonzero(h.counts)
    if len(nz) == 0:
        return ExponentHistogram(0, np.zeros(0, dtype=np.int64), h.zero_count)
    return ExponentHistogram(h.bin_offset + int(nz[0]), h.counts[nz[0]:nz[-1] + 1], h.zero_count)


def exponent_histogram(t) -> ExponentHistogram:
    x = np.asarray(t, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("histogram input must be finite")
    nonzero = x[x != 0]
    zero_count = int(x.size - nonzero.size)
    if nonzero.size == 0:
        return ExponentHistogram(0, np.zeros(0, dtype=np.int64), zero_count)
    _, e = np.frexp(np.abs(nonzero))
    exps = e.astype(np.int64) - 1
    lo = int(exps.min())
    return ExponentHistogram(lo, np.bincount(exps - lo), zero_count)


def merge(a: ExponentHistogram, b: ExponentHistogram) -> ExponentHistogram:
    """Bin-wise sum, aligned on absolute exponents."""
    a, b = _trim(a), _trim(b)
    if len(a.counts) == 0 or len(b.counts) == 0:
        full = a if len(a.counts) else b
        return ExponentHistogram(full.bin_offset, full.counts.copy(), a.zero_count + b.zero_count)
    lo = min(a.bin_offset, b.bin_offset)
    hi = max(a.bin_offset + len(a.counts), b.bin_offset + len(b.counts))
    counts = np.zeros(hi - lo, dtype=np.int64)
    counts[a.bin_offset - lo:a.bin_offset - lo + len(a.counts)] += a.counts
    counts[b.bin_offset - lo:b.bin_offset - lo + len(b.counts)] += b.counts
    return ExponentHistogram(lo, counts, a.zero_count + b.zero_count)


@dataclass(frozen=True)
class Coverage:
    in_range: float
    underflow: float
    overflow: float


def _require_mass(h: ExponentHistogram) -> int:
    n = h.nonzero
    if n == 0:
        raise EmptyHistogramError("histogram has no nonzero values")
    return n


def coverage(h: ExponentHistogram, fmt: FloatFormat) -> Coverage:
    """Fractions of the nonzero mass below, inside and above the range.

    A bin that straddles ``min_subnormal`` or ``max_normal`` counts as in
    range.
    """
    n = _require_mass(h)
    lim = fmt.limits
    e = h.exponents
    # bin e spans [2**e, 2**(e+1))
    under = np.ldexp(1.0, e + 1) <= lim.min_subnormal
    over = np.ldexp(1.0, e) > lim.max_normal
    u = int(h.counts[under].sum())
    o = int(h.counts[over].sum())
    return Coverage((n - u - o) / n, u / n, o / n)


def strict_overflow(h: ExponentHistogram, fmt: FloatFormat) -> float:
    """Fraction of nonzero mass in bins not entirely below ``max_normal``."""
    n = _require_mass(h)
    over = np.ldexp(1.0, h.exponents + 1) > fmt.limits.max_normal
    return int(h.counts[over].sum()) / n


def suggest_bias(h: ExponentHistogram, exponent_bits: int, significand_bits: int,
                 clip_quantile: float = 0.0, bias_range: tuple[int, int] = (-64, 64)) -> int:
    """Largest bias whose range holds all but ``clip_quantile`` of the mass.

    A bin is only considered held when its whole octave lies at or below
    ``max_normal``. Raising the bias buys range at the small end, so among the
    feasible biases the largest wins. If no bias in ``bias_range`` is
    feasible, the bias with the least overflow is returned (the smallest one
    on ties, i.e. the widest range upwards).
    """
    if exponent_bits < 1 or significand_bits < 0:
        raise ValueError("suggest_bias needs a floating-point format (E >= 1)")
    if not 0.0 <= clip_quantile < 0.01:
        raise ValueError("clip_quantile must lie in [0, 0.01)")
    _require_mass(h)
    lo, hi = bias_range
    scan = [(b, strict_overflow(h, FloatFormat(exponent_bits, significand_bits, b))) for b in range(lo, hi + 1)]
    feasible = [b for b, over in scan if over <= clip_quantile]
    if feasible:
        return max(feasible)
    least = min(over for _, over in scan)
    return min(b for b, over in scan if over == least)


def octave_edges(fmt: FloatFormat) -> tuple[float, float]:
    """``log2`` of the smallest and largest positive values of ``fmt``."""
    lim = fmt.limits
    return math.log2(lim.min_subnormal), math.log2(lim.max_normal)
