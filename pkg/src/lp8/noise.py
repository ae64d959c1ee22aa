"""Dynamic range and quantization-noise models, analytic and Monte-Carlo.

Fixed-point model: a sign-magnitude quantizer with ``n`` magnitude bits and
step ``q`` applied to a standard normal signal. Its noise splits into a
rounding part inside the range and a clipping part beyond ``m*q`` with
``m = 2**n - 1``::

    rounding = q**2 / 12 * erf(m*q / sqrt(2))
    clipping = (1 + m**2 q**2) * (1 - erf(m*q / sqrt(2)))
               - sqrt(2/pi) * m*q * exp(-m**2 q**2 / 2)
    SNR      = -10 log10(rounding + clipping)

Floating-point model: with ``P`` significand bits including the hidden bit,
the noise variance is about ``0.18 * 2**(-2P)`` of the signal power, i.e.
``SNR_dB ~= 7.44 + 6.02 P`` independently of the signal scale as long as
the signal stays inside the dynamic range.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .formats import FloatFormat, QuantizerConfig, make_format, quantize_array

__all__ = [
    "RNG_NAME",
    "SNR_CAP_DB",
    "NoiseBreakdown",
    "RangeFormat",
    "FormatReport",
    "REFERENCE_FORMATS",
    "dynamic_range_db_fixed",
    "dynamic_range_db_float",
    "snr_db_float_model",
    "snr_db_fixed_model",
    "noise_components_fixed",
    "peak_snr_fixed",
    "fixed_point_format",
    "snr_db_from_samples",
    "snr_db_empirical",
    "format_report",
]

RNG_NAME = "numpy.random.Generator(PCG64).standard_normal (ziggurat)"

# Returned when the quantization error energy is exactly zero.
SNR_CAP_DB = 300.0


@dataclass(frozen=True)
class NoiseBreakdown:
    q: float
    rounding_noise: float
    clipping_noise: float
    total: float
    snr_db: float


@dataclass(frozen=True)
class RangeFormat:
    """Range description of a float format, wide enough for IEEE types.

    Unlike :class:`~lp8.formats.FloatFormat` this carries no codec and no
    16-bit ceiling. ``extended_range`` means the all-ones exponent field holds
    normal values; without it the field is reserved for Inf/NaN as in
    IEEE-754. Without ``subnormals`` the zero exponent field holds normal
    values too, and only the all-zero pattern is zero.
    """

    name: str
    exponent_bits: int
    significand_bits: int
    bias: int | None = None
    extended_range: bool = True
    subnormals: bool = True

    def __post_init__(self):
        if self.exponent_bits < 1:
            raise ValueError("RangeFormat needs at least one exponent bit")
        if self.bias is None:
            object.__setattr__(self, "bias", 2 ** (self.exponent_bits - 1) - 1)

    @classmethod
    def from_format(cls, fmt: FloatFormat, subnormals: bool = True) -> "RangeFormat":
        return cls(fmt.name, fmt.exponent_bits, fmt.significand_bits, fmt.bias, True, subnormals)

    @property
    def precision_total(self) -> int:
        return self.significand_bits + 1

    def extremes(self) -> tuple[float, float]:
        """``(max_finite, min_positive)`` as exact floats."""
        E, p, b = self.exponent_bits, self.significand_bits, self.bias
        top_field = 2**E - 1 if self.extended_range else 2**E - 2
        max_finite = math.ldexp(2.0 - math.ldexp(1.0, -p), top_field - b)
        if self.subnormals:
            min_positive = math.ldexp(1.0, 1 - b - p)
        else:
            min_positive = math.ldexp(1.0 + math.ldexp(1.0, -p), -b)
        return max_finite, min_positive


REFERENCE_FORMATS: dict[str, RangeFormat] = {
    "float32": RangeFormat("float32", 8, 23, extended_range=False),
    "float16": RangeFormat("float16", 5, 10, extended_range=False),
    "bfloat16": RangeFormat("bfloat16", 8, 7, extended_range=False),
    "dlfloat": RangeFormat("dlfloat", 6, 9, subnormals=False),
    "1.5.2": RangeFormat("1.5.2", 5, 2),
    "1.4.3": RangeFormat("1.4.3", 4, 3),
    "1.3.4": RangeFormat("1.3.4", 3, 4),
}


def dynamic_range_db_fixed(n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    return 20.0 * n * math.log10(2.0)


def dynamic_range_db_float(fmt: FloatFormat | RangeFormat, subnormals: bool = True) -> float:
    """``20 log10(max / min_positive)``; bias independent."""
    if isinstance(fmt, FloatFormat):
        if fmt.is_scaled_integer:
            raise ValueError("scaled-integer formats use dynamic_range_db_fixed")
        fmt = RangeFormat.from_format(fmt, subnormals)
    elif not subnormals and fmt.subnormals:
        fmt = RangeFormat(fmt.name, fmt.exponent_bits, fmt.significand_bits, fmt.bias, fmt.extended_range, False)
    hi, lo = fmt.extremes()
    return 20.0 * math.log10(hi / lo)


def snr_db_float_model(precision_total: int) -> float:
    if precision_total < 1:
        raise ValueError("precision_total must be >= 1")
    return 7.44 + 6.02 * precision_total


def snr_db_fixed_model(q: float, n: int) -> NoiseBreakdown:
    if q <= 0 or n < 1:
        raise ValueError("need q > 0 and n >= 1")
    mq = (2**n - 1) * q
    erfc = math.erfc(mq / math.sqrt(2.0))
    rounding = q * q / 12.0 * (1.0 - erfc)
    # The closed form cancels catastrophically once erfc underflows; the
    # underlying integral is nonnegative.
    clipping = max(0.0, (1.0 + mq * mq) * erfc - math.sqrt(2.0 / math.pi) * mq * math.exp(-mq * mq / 2.0))
    total = rounding + clipping
    return NoiseBreakdown(q, rounding, clipping, total, -10.0 * math.log10(total))


def noise_components_fixed(q_grid, n: int) -> list[NoiseBreakdown]:
    return [snr_db_fixed_model(float(q), n) for q in q_grid]


def peak_snr_fixed(n: int, log2_lo: float = -8.0, log2_hi: float = -2.0, points_per_octave: int = 64) -> tuple[float, float]:
    """Grid argmax of the fixed-point model: ``(q, snr_db)``."""
    count = int(round((log2_hi - log2_lo) * points_per_octave)) + 1
    grid = np.exp2(np.linspace(log2_lo, log2_hi, count))
    snrs = [snr_db_fixed_model(float(q), n).snr_db for q in grid]
    best = int(np.argmax(snrs))
    return float(grid[best]), snrs[best]


def fixed_point_format(n: int, q: float) -> FloatFormat:
    """The scaled integer 1.0.n whose step is ``q`` (a power of two)."""
    mantissa, exponent = math.frexp(q)
    if mantissa != 0.5:
        raise ValueError(f"step {q} is not a power of two")
    return make_format(0, n, -(exponent - 1))


def snr_db_from_samples(x, xhat) -> float:
    x = np.asarray(x, dtype=np.float64)
    err = np.asarray(xhat, dtype=np.float64) - x
    noise = float(np.dot(err, err))
    if noise == 0.0:
        return SNR_CAP_DB
    return 10.0 * math.log10(float(np.dot(x, x)) / noise)


def snr_db_empirical(config: QuantizerConfig | FloatFormat, signal_sigma: float = 1.0,
                     num_samples: int = 10**6, seed: int = 0) -> float:
    """Monte-Carlo SNR of nearest-even, clipping quantization of N(0, sigma^2).

    Only the format of ``config`` is used; the measurement always rounds to
    nearest-even and clips, so results are comparable with the models.
    """
    if num_samples < 10**4:
        raise ValueError("num_samples must be at least 1e4")
    fmt = config.format if isinstance(config, QuantizerConfig) else config
    rng = np.random.default_rng(seed)
    x = signal_sigma * rng.standard_normal(num_samples)
    return snr_db_from_samples(x, quantize_array(x, QuantizerConfig(fmt)))


@dataclass(frozen=True)
class FormatReport:
    format: str
    kind: str
    exponent_bits: int
    significand_bits: int
    bias: int
    dynamic_range_db: float
    snr_db_model: float
    precision_total: int
    subnormals: bool = True
    extended_range: bool = True
    # Scaled integers only: peak of the fixed-point model over the step.
    snr_db_peak: float | None = None
    q: float | None = None
    q_peak: float | None = None

    def to_dict(self) -> dict:
        return {"schema": 1, **asdict(self)}


def format_report(fmt: FloatFormat | RangeFormat) -> FormatReport:
    if isinstance(fmt, FloatFormat) and fmt.is_scaled_integer:
        n, q = fmt.significand_bits, math.ldexp(1.0, -fmt.bias)
        q_peak, snr_peak = peak_snr_fixed(n)
        return FormatReport(str(fmt), "fixed", 0, n, fmt.bias, dynamic_range_db_fixed(n),
                            snr_db_fixed_model(q, n).snr_db, n, snr_db_peak=snr_peak, q=q, q_peak=q_peak)
    label = str(fmt)
    if isinstance(fmt, FloatFormat):
        fmt = RangeFormat.from_format(fmt)
    else:
        label = f"{fmt.name}:b{fmt.bias}"
    return FormatReport(label, "float", fmt.exponent_bits, fmt.significand_bits, fmt.bias,
                        dynamic_range_db_float(fmt), snr_db_float_model(fmt.precision_total),
                        fmt.precision_total, fmt.subnormals, fmt.extended_range)
