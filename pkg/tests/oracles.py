"""Independent reference implementations used as test oracles.

Everything here is written from the field definitions with exact rational
arithmetic and brute-force search, sharing no code with the package.
"""

from __future__ import annotations

import math
from fractions import Fraction


def field_value(sign: int, exp_field: int, sig_field: int, E: int, p: int, bias: int) -> Fraction | None:
    """Exact value of a codeword given its fields; ``None`` for the NaN pattern."""
    if sign == 1 and exp_field == 0 and sig_field == 0:
        return None
    two = Fraction(2)
    if E == 0:
        mag = sig_field * two ** (-bias)
    elif exp_field == 0:
        mag = Fraction(sig_field, 2**p) * two ** (1 - bias)
    else:
        mag = (1 + Fraction(sig_field, 2**p)) * two ** (exp_field - bias)
    return -mag if sign else mag


def all_codewords(E: int, p: int, bias: int) -> dict[int, Fraction | None]:
    """raw -> exact value, for every ``2**(1+E+p)`` pattern."""
    out = {}
    for raw in range(2 ** (1 + E + p)):
        sign = raw >> (E + p)
        exp_field = (raw >> p) & ((1 << E) - 1)
        sig_field = raw & ((1 << p) - 1)
        out[raw] = field_value(sign, exp_field, sig_field, E, p, bias)
    return out


def finite_values(E: int, p: int, bias: int) -> list[Fraction]:
    return sorted(v for v in all_codewords(E, p, bias).values() if v is not None)


def nearest_even(x: float, E: int, p: int, bias: int, clip: bool = True):
    """Brute-force nearest codeword value with ties to the even raw pattern.

    Adjacent magnitudes differ by one in the raw pattern, so the even raw is
    the even significand. Returns a float, or NaN for signal-mode overflow.
    """
    table = all_codewords(E, p, bias)
    xf = Fraction(x)
    max_val = max(v for v in table.values() if v is not None)
    if abs(xf) > max_val:
        if not clip:
            return math.nan
        return float(max_val if x > 0 else -max_val)
    best = None
    for raw, v in table.items():
        if v is None:
            continue
        # never pick the negative-signed pattern for zero
        d = abs(v - xf)
        key = (d, raw & 1, raw)
        if best is None or key < best[0]:
            best = (key, v)
    return float(best[1]) + 0.0


def normal_two_sided_below(t: float) -> float:
    """P(|Z| < t) for a standard normal Z."""
    return math.erf(t / math.sqrt(2.0))
