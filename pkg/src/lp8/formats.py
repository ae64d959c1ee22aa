"""Parametric 1.E.p number formats: bit layout, codec and quantize-dequantize.

A format has one sign bit, ``E`` exponent bits and ``p`` stored significand
bits, plus an arbitrary integer exponent bias. Two deviations from IEEE-754
apply to every format built here:

* the all-ones exponent field holds ordinary normal values (one extra octave
  of range), and
* the only non-finite codeword is the "negative zero" pattern (sign bit set,
  everything else clear), which decodes to NaN.

With ``E == 0`` the format is a sign-magnitude scaled integer whose value is
``(-1)**s * m * 2**-bias``.

All value computations happen in float64, where every value of a format of
at most 16 bits is exact.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

__all__ = [
    "MAX_TOTAL_BITS",
    "FormatError",
    "MissingRngError",
    "Rounding",
    "Overflow",
    "FloatFormat",
    "FormatLimits",
    "Codeword",
    "QuantizerConfig",
    "make_format",
    "natural_bias",
    "parse_format",
    "format_limits",
    "decode",
    "decode_array",
    "encode",
    "encode_array",
    "quantize",
    "quantize_array",
    "quantize_tensor",
    "enumerate_values",
]

MAX_TOTAL_BITS = 16


class FormatError(ValueError):
    """Invalid format dimensions or an unparsable format string."""


class MissingRngError(ValueError):
    """Stochastic rounding was requested without a random generator."""


class Rounding(str, enum.Enum):
    NEAREST_EVEN = "nearest"
    STOCHASTIC = "stochastic"


class Overflow(str, enum.Enum):
    CLIP = "clip"
    SIGNAL_NAN = "nan"


def natural_bias(exponent_bits: int) -> int:
    """IEEE-style centred bias ``2**(E-1) - 1``; zero for scaled integers."""
    if exponent_bits == 0:
        return 0
    return 2 ** (exponent_bits - 1) - 1


class FormatLimits(NamedTuple):
    e_min: int
    e_max: int
    max_normal: float
    min_normal: float
    min_subnormal: float

    @property
    def min_positive(self) -> float:
        return self.min_subnormal


@dataclass(frozen=True)
class FloatFormat:
    """A 1.E.p format with exponent bias ``bias``.

    Prefer :func:`make_format` or :func:`parse_format` for construction; both
    validate the dimensions the same way ``__post_init__`` does.
    """

    exponent_bits: int
    significand_bits: int
    bias: int

    def __post_init__(self):
        for name in ("exponent_bits", "significand_bits", "bias"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise FormatError(f"{name} must be an integer, got {value!r}")
        E, p = self.exponent_bits, self.significand_bits
        if E < 0 or p < 0:
            raise FormatError(f"negative field width in 1.{E}.{p}")
        if E + p < 1:
            raise FormatError("a format needs at least one exponent or significand bit")
        if 1 + E + p > MAX_TOTAL_BITS:
            raise FormatError(f"1.{E}.{p} has {1 + E + p} bits; at most {MAX_TOTAL_BITS} supported")

    @property
    def total_bits(self) -> int:
        return 1 + self.exponent_bits + self.significand_bits

    @property
    def is_scaled_integer(self) -> bool:
        return self.exponent_bits == 0

    @property
    def nan_codeword(self) -> int:
        return 1 << (self.total_bits - 1)

    @property
    def name(self) -> str:
        return f"1.{self.exponent_bits}.{self.significand_bits}"

    def __str__(self) -> str:
        return f"{self.name}:b{self.bias}"

    def with_bias(self, bias: int) -> "FloatFormat":
        return FloatFormat(self.exponent_bits, self.significand_bits, bias)

    @cached_property
    def limits(self) -> FormatLimits:
        E, p, b = self.exponent_bits, self.significand_bits, self.bias
        if E == 0:
            unit = math.ldexp(1.0, -b)
            return FormatLimits(-b, -b, (2**p - 1) * unit, unit, unit)
        e_min = 1 - b
        e_max = 2**E - 1 - b
        max_normal = math.ldexp(2.0 - math.ldexp(1.0, -p), e_max)
        return FormatLimits(e_min, e_max, max_normal, math.ldexp(1.0, e_min), math.ldexp(1.0, e_min - p))

    @cached_property
    def value_table(self) -> np.ndarray:
        """Decoded value of every codeword, indexed by raw bits (NaN included)."""
        table = np.array([_decode_raw(raw, self) for raw in range(1 << self.total_bits)])
        table.setflags(write=False)
        return table


def make_format(exponent_bits: int, significand_bits: int, bias: int | None = None) -> FloatFormat:
    """Build a validated format; ``bias=None`` selects the natural bias."""
    if bias is None:
        bias = natural_bias(exponent_bits)
    return FloatFormat(exponent_bits, significand_bits, bias)


_FORMAT_RE = re.compile(r"^\s*1\.(\d+)\.(\d+)(?::b([+-]?\d+))?\s*$")


def parse_format(text: str) -> FloatFormat:
    """Parse ``1.<E>.<p>[:b<bias>]``, e.g. ``1.4.3:b10`` or ``1.5.2``."""
    match = _FORMAT_RE.match(text)
    if match is None:
        raise FormatError(f"cannot parse format string {text!r}; expected 1.<E>.<p>[:b<bias>]")
    E, p = int(match.group(1)), int(match.group(2))
    bias = None if match.group(3) is None else int(match.group(3))
    return make_format(E, p, bias)


def format_limits(fmt: FloatFormat) -> FormatLimits:
    return fmt.limits


class Codeword(NamedTuple):
    """Raw bits laid out as ``[sign | exponent field | significand field]``."""

    raw: int

    @classmethod
    def from_fields(cls, sign: int, exponent: int, significand: int, fmt: FloatFormat) -> "Codeword":
        E, p = fmt.exponent_bits, fmt.significand_bits
        if not (0 <= sign <= 1 and 0 <= exponent < (1 << E) and 0 <= significand < (1 << p)):
            raise FormatError(f"fields ({sign}, {exponent}, {significand}) do not fit {fmt.name}")
        return cls((sign << (E + p)) | (exponent << p) | significand)

    def fields(self, fmt: FloatFormat) -> tuple[int, int, int]:
        """Split into ``(sign, exponent_field, significand_field)``."""
        E, p = fmt.exponent_bits, fmt.significand_bits
        return (self.raw >> (E + p)) & 1, (self.raw >> p) & ((1 << E) - 1), self.raw & ((1 << p) - 1)


@dataclass(frozen=True)
class QuantizerConfig:
    format: FloatFormat
    rounding: Rounding = Rounding.NEAREST_EVEN
    overflow: Overflow = Overflow.CLIP

    def __post_init__(self):
        object.__setattr__(self, "rounding", Rounding(self.rounding))
        object.__setattr__(self, "overflow", Overflow(self.overflow))

    def with_bias(self, bias: int) -> "QuantizerConfig":
        return QuantizerConfig(self.format.with_bias(bias), self.rounding, self.overflow)

    def __str__(self) -> str:
        return f"{self.format}/{self.rounding.value}/{self.overflow.value}"


# -- decoding -----------------------------------------------------------------


def _decode_raw(raw: int, fmt: FloatFormat) -> float:
    E, p, b = fmt.exponent_bits, fmt.significand_bits, fmt.bias
    if raw == fmt.nan_codeword:
        return math.nan
    sign, e_field, m = Codeword(raw).fields(fmt)
    if E == 0:
        magnitude = math.ldexp(float(m), -b)
    elif e_field == 0:
        magnitude = math.ldexp(float(m), 1 - b - p)
    else:
        magnitude = math.ldexp(float((1 << p) + m), e_field - b - p)
    return -magnitude if sign else magnitude


def decode(c: Codeword | int, fmt: FloatFormat) -> float:
    raw = int(c.raw if isinstance(c, Codeword) else c)
    if not 0 <= raw < (1 << fmt.total_bits):
        raise FormatError(f"codeword {raw:#x} does not fit in {fmt.total_bits} bits")
    return _decode_raw(raw, fmt)


def decode_array(raw, fmt: FloatFormat) -> np.ndarray:
    raw = np.asarray(raw)
    if raw.size and (raw.min() < 0 or raw.max() >= (1 << fmt.total_bits)):
        raise FormatError(f"codewords out of range for {fmt.total_bits}-bit format")
    return fmt.value_table[raw.astype(np.intp)]


def enumerate_values(fmt: FloatFormat) -> np.ndarray:
    """All finite values of ``fmt`` in ascending order (``+0`` appears once)."""
    table = fmt.value_table
    return np.sort(table[~np.isnan(table)])


# -- quantization ---------------------------------------------------------------


def _check_rng(config: QuantizerConfig, rng) -> None:
    if config.rounding is Rounding.STOCHASTIC and rng is None:
        raise MissingRngError("stochastic rounding needs a numpy random Generator")


def _quantize(x: np.ndarray, config: QuantizerConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Return (quantized values, overflow mask) for a float64 array."""
    fmt = config.format
    lim = fmt.limits
    a = np.abs(x)
    if fmt.is_scaled_integer:
        step_exp = np.full(a.shape, -fmt.bias)
    else:
        # frexp: a = f * 2**e with f in [0.5, 1), so floor(log2 a) = e - 1.
        _, e = np.frexp(a)
        step_exp = np.maximum(e - 1, lim.e_min) - fmt.significand_bits
    with np.errstate(invalid="ignore", over="ignore"):
        scaled = np.ldexp(a, -step_exp)
        if config.rounding is Rounding.NEAREST_EVEN:
            rounded = np.rint(scaled)
        else:
            rounded = np.floor(scaled + rng.random(a.shape))
        magnitude = np.ldexp(rounded, step_exp)
    overflow = a > lim.max_normal
    if config.overflow is Overflow.CLIP:
        magnitude = np.minimum(magnitude, lim.max_normal)
    else:
        magnitude = np.where(overflow, np.nan, magnitude)
    # Adding +0.0 turns -0.0 into +0.0; negative zero is the NaN codeword.
    return np.copysign(magnitude, x) + 0.0, overflow


def quantize_array(x, config: QuantizerConfig, rng=None) -> np.ndarray:
    """Elementwise quantize-dequantize of an array (float64 result)."""
    _check_rng(config, rng)
    return _quantize(np.asarray(x, dtype=np.float64), config, rng)[0]


def quantize_tensor(t, config: QuantizerConfig, rng=None) -> tuple[np.ndarray, bool]:
    """Quantize-dequantize a tensor and report whether any element overflowed.

    In signal-NaN mode the overflowed elements come back as NaN.
    """
    _check_rng(config, rng)
    values, overflow = _quantize(np.asarray(t, dtype=np.float64), config, rng)
    return values, bool(overflow.any())


def quantize(x: float, config: QuantizerConfig, rng=None) -> float:
    return float(quantize_array(np.float64(x), config, rng))


def _values_to_raw(values: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    E, p, b = fmt.exponent_bits, fmt.significand_bits, fmt.bias
    nan = np.isnan(values)
    a = np.abs(np.where(nan, 0.0, values))
    sign = (values < 0).astype(np.int64)
    if E == 0:
        e_field = np.zeros(a.shape, dtype=np.int64)
        m = np.ldexp(a, b)
    else:
        lim = fmt.limits
        _, e = np.frexp(a)
        normal = a >= lim.min_normal
        e_field = np.where(normal, e - 1 + b, 0).astype(np.int64)
        m = np.where(normal, np.ldexp(a, p - (e - 1)) - (1 << p), np.ldexp(a, p - lim.e_min))
    raw = (sign << (E + p)) | (e_field << p) | m.astype(np.int64)
    return np.where(nan, fmt.nan_codeword, raw).astype(np.uint16 if fmt.total_bits <= 16 else np.int64)


def encode_array(x, config: QuantizerConfig, rng=None) -> np.ndarray:
    """Encode an array to raw codewords (``uint16``)."""
    return _values_to_raw(quantize_array(x, config, rng), config.format)


def encode(x: float, config: QuantizerConfig, rng=None) -> Codeword:
    return Codeword(int(encode_array(np.float64(x), config, rng)))
