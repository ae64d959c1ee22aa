import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from lp8.formats import (
    Codeword,
    FloatFormat,
    FormatError,
    MissingRngError,
    QuantizerConfig,
    decode,
    decode_array,
    encode,
    encode_array,
    enumerate_values,
    format_limits,
    make_format,
    natural_bias,
    parse_format,
    quantize,
    quantize_array,
    quantize_tensor,
)

EIGHT_BIT = [(5, 2), (4, 3), (3, 4), (2, 5), (6, 1), (0, 7), (1, 6), (7, 0)]
NEAREST = "nearest"


def cfg(fmt, rounding=NEAREST, overflow="clip"):
    return QuantizerConfig(fmt, rounding, overflow)


# -- construction -------------------------------------------------------------------


def test_make_format_143_limits():
    f = make_format(4, 3, 7)
    lim = format_limits(f)
    assert f.total_bits == 8
    assert lim.e_max == 8 and lim.e_min == -6
    assert lim.max_normal == 480.0
    assert lim.min_normal == 2.0**-6
    assert lim.min_subnormal == 2.0**-9


def test_make_format_152_limits():
    lim = make_format(5, 2, 15).limits
    assert lim.e_max == 16
    assert lim.max_normal == 114688.0 == 2**16 * 1.75


def test_scaled_integer_values():
    values = enumerate_values(make_format(0, 7, 0))
    assert list(values) == list(range(-127, 128))
    lim = make_format(0, 7, 0).limits
    assert lim.max_normal == 127 and lim.min_subnormal == 1


def test_bias_shift_halves_limits():
    a, b = make_format(4, 3, 7).limits, make_format(4, 3, 8).limits
    for x, y in zip(a[2:], b[2:]):
        assert y == x / 2


@pytest.mark.parametrize("E,p", [(-1, 3), (2, -1), (0, 0), (8, 8), (15, 1)])
def test_make_format_rejects_bad_dimensions(E, p):
    with pytest.raises(FormatError):
        make_format(E, p, 0)


def test_make_format_accepts_16_bits():
    assert make_format(5, 10).total_bits == 16


def test_bias_must_be_integer():
    with pytest.raises(FormatError):
        FloatFormat(4, 3, 7.5)


@pytest.mark.parametrize("text,expected", [
    ("1.4.3", (4, 3, 7)),
    ("1.4.3:b10", (4, 3, 10)),
    ("1.5.2:b-3", (5, 2, -3)),
    (" 1.0.7 ", (0, 7, 0)),
    ("1.5.2", (5, 2, 15)),
])
def test_parse_format(text, expected):
    f = parse_format(text)
    assert (f.exponent_bits, f.significand_bits, f.bias) == expected


@pytest.mark.parametrize("text", ["", "1.4", "2.4.3", "1.4.3:7", "1.4.3:bx", "e4m3"])
def test_parse_format_rejects(text):
    with pytest.raises(FormatError):
        parse_format(text)


def test_parse_roundtrips_str():
    f = make_format(3, 4, -2)
    assert parse_format(str(f)) == f


def test_natural_bias():
    assert [natural_bias(E) for E in range(6)] == [0, 0, 1, 3, 7, 15]


# -- decode against the exact oracle --------------------------------------------------------


@pytest.mark.parametrize("E,p", EIGHT_BIT)
@pytest.mark.parametrize("shift", [-8, 0, 8])
def test_decode_matches_exact_oracle(E, p, shift):
    bias = natural_bias(E) + shift
    fmt = make_format(E, p, bias)
    for raw, value in oracles.all_codewords(E, p, bias).items():
        got = decode(raw, fmt)
        if value is None:
            assert math.isnan(got)
        else:
            assert got == float(value)


def test_decode_examples():
    f = make_format(4, 3, 7)
    assert decode(Codeword.from_fields(0, 7, 0, f), f) == 1.0
    assert decode(Codeword.from_fields(0, 15, 7, f), f) == 480.0
    for E, p in EIGHT_BIT:
        g = make_format(E, p)
        assert math.isnan(decode(Codeword.from_fields(1, 0, 0, g), g))


def test_decode_rejects_out_of_range_raw():
    with pytest.raises(FormatError):
        decode(256, make_format(4, 3))
    with pytest.raises(FormatError):
        decode_array([0, 300], make_format(4, 3))


def test_codeword_fields_roundtrip():
    f = make_format(4, 3)
    for raw in range(256):
        assert Codeword.from_fields(*Codeword(raw).fields(f), f).raw == raw
    with pytest.raises(FormatError):
        Codeword.from_fields(0, 16, 0, f)


@pytest.mark.parametrize("E,p", EIGHT_BIT)
def test_enumerate_values_counts(E, p):
    fmt = make_format(E, p)
    values = enumerate_values(fmt)
    assert len(values) == 255
    assert len(np.unique(values)) == 255
    assert np.count_nonzero(np.isnan(fmt.value_table)) == 1
    assert values.max() == fmt.limits.max_normal
    assert values.min() == -fmt.limits.max_normal
    assert list(values) == [float(v) for v in oracles.finite_values(E, p, fmt.bias)]


@pytest.mark.parametrize("E,p", [(4, 3), (5, 2), (3, 4)])
def test_limits_are_codewords(E, p):
    fmt = make_format(E, p)
    values = set(enumerate_values(fmt))
    lim = fmt.limits
    assert {lim.max_normal, lim.min_normal, lim.min_subnormal} <= values
    assert lim.min_subnormal < lim.min_normal <= lim.max_normal


@pytest.mark.parametrize("E,p", EIGHT_BIT)
def test_decode_sign_magnitude_order(E, p):
    fmt = make_format(E, p)
    half = 1 << (E + p)
    pos = decode_array(np.arange(half), fmt)
    neg = decode_array(np.arange(half + 1, 2 * half), fmt)
    assert np.all(np.diff(pos) > 0)
    assert np.all(np.diff(neg) < 0)


# -- encode / quantize examples -----------------------------------------------------


F143 = make_format(4, 3, 7)
F152 = make_format(5, 2, 15)


def test_encode_examples():
    c = cfg(F143)
    assert encode(1.0, c).fields(F143) == (0, 7, 0)
    assert decode(encode(500.0, c), F143) == 480.0
    assert encode(1.0625, c) == encode(1.0, c)
    assert decode(encode(1.1875, c), F143) == 1.25  # tie between 1.125 and 1.25 goes to even m=2


def test_quantize_examples():
    assert quantize(0.0, cfg(F143)) == 0.0
    assert quantize(480.0 + 1e-9, cfg(F143)) == 480.0
    assert quantize(3.0, cfg(F152)) == 3.0


def test_halfway_to_clip_threshold_goes_to_max():
    # 496 is halfway between 480 and the first unrepresentable step 512
    assert quantize(496.0, cfg(F143)) == 480.0
    assert quantize(-496.0, cfg(F143)) == -480.0


def test_signal_nan_mode():
    c = cfg(F143, overflow="nan")
    assert math.isnan(quantize(1e6, c))
    assert quantize(480.0, c) == 480.0
    # the input is in range even though it rounds up to max_normal
    assert quantize(479.0, c) == 480.0
    assert encode(1e6, c).raw == F143.nan_codeword


def test_tiny_values_round_to_positive_zero():
    half_min = F143.limits.min_subnormal / 2
    for x in (half_min, -half_min, -1e-30, 1e-30):
        q = quantize(x, cfg(F143))
        assert q == 0.0 and math.copysign(1.0, q) == 1.0
        assert encode(x, cfg(F143)).raw == 0


def test_just_above_half_min_rounds_to_min():
    m = F143.limits.min_subnormal
    assert quantize(m / 2 * (1 + 2**-20), cfg(F143)) == m


def test_nan_input_maps_to_nan_codeword():
    assert encode(math.nan, cfg(F143)).raw == 0x80
    assert math.isnan(quantize(math.nan, cfg(F143)))


def test_quantize_tensor_examples():
    c = cfg(F143)
    zeros, flag = quantize_tensor(np.zeros((3, 4)), c)
    assert not flag and np.array_equal(zeros, np.zeros((3, 4)))
    out, flag = quantize_tensor(np.array([1.0, 1e6, -2.0]), c)
    assert flag and out[1] == 480.0
    table = enumerate_values(F143)
    same, flag = quantize_tensor(table.reshape(15, 17), c)
    assert not flag and np.array_equal(same.ravel(), table)
    nanned, flag = quantize_tensor(np.array([1.0, -1e6]), cfg(F143, overflow="nan"))
    assert flag and math.isnan(nanned[1]) and nanned[0] == 1.0


def test_stochastic_needs_rng():
    with pytest.raises(MissingRngError):
        quantize(1.0, cfg(F143, "stochastic"))
    with pytest.raises(MissingRngError):
        encode(1.0, cfg(F143, "stochastic"))


def test_stochastic_exact_values_are_fixed_points():
    rng = np.random.default_rng(1)
    table = enumerate_values(F143)
    assert np.array_equal(quantize_array(np.repeat(table, 20), cfg(F143, "stochastic"), rng), np.repeat(table, 20))


def test_stochastic_returns_bracketing_values():
    rng = np.random.default_rng(2)
    out = quantize_array(np.full(10_000, 1.03), cfg(F143, "stochastic"), rng)
    assert set(np.unique(out)) == {1.0, 1.125}
    # P(up) = 0.03 / 0.125
    assert abs(np.mean(out == 1.125) - 0.24) < 0.02


@pytest.mark.parametrize("E,p", [(4, 3), (5, 2), (0, 7), (2, 5)])
def test_nearest_even_matches_brute_force(E, p):
    fmt = make_format(E, p)
    rng = np.random.default_rng(E * 10 + p)
    lim = fmt.limits
    xs = np.concatenate([
        rng.standard_normal(150) * lim.max_normal / 4,
        np.exp2(rng.uniform(math.log2(lim.min_subnormal) - 2, math.log2(lim.max_normal) + 1, 150))
        * rng.choice([-1, 1], 150),
    ])
    # midpoints exercise the tie rule
    table = enumerate_values(fmt)
    xs = np.concatenate([xs, (table[:-1] + table[1:]) / 2])
    got = quantize_array(xs, cfg(fmt))
    want = [oracles.nearest_even(float(x), E, p, fmt.bias) for x in xs]
    assert np.array_equal(got, want)


def test_encode_array_roundtrip_all_codewords():
    for E, p in EIGHT_BIT:
        fmt = make_format(E, p)
        raws = np.array([r for r in range(256) if r != fmt.nan_codeword])
        assert np.array_equal(encode_array(decode_array(raws, fmt), cfg(fmt)), raws)


# -- properties -----------------------------------------------------------------------


formats = st.sampled_from(EIGHT_BIT).flatmap(
    lambda ep: st.integers(-20, 30).map(lambda b: make_format(ep[0], ep[1], b)))
reals = st.floats(min_value=-1e12, max_value=1e12, allow_nan=False)


@given(formats, reals, reals)
def test_monotone(fmt, x, y):
    x, y = sorted((x, y))
    c = cfg(fmt)
    assert quantize(x, c) <= quantize(y, c)


@given(formats, reals)
def test_sign_symmetry(fmt, x):
    c = cfg(fmt)
    assert quantize(-x, c) == -quantize(x, c)


@given(formats, reals, st.integers(-8, 8))
def test_bias_shift_equivalence(fmt, x, k):
    lhs = quantize(x, cfg(fmt.with_bias(fmt.bias + k)))
    rhs = 2.0**-k * quantize(x * 2.0**k, cfg(fmt))
    assert lhs == rhs


@given(formats, reals)
def test_idempotent(fmt, x):
    c = cfg(fmt)
    once = quantize(x, c)
    assert quantize(once, c) == once


@given(formats, st.floats(min_value=0, max_value=1, exclude_max=True), st.booleans())
def test_relative_error_bound(fmt, u, negative):
    assume(not fmt.is_scaled_integer)
    lim = fmt.limits
    x = 2.0 ** (math.log2(lim.min_normal) + u * (math.log2(lim.max_normal) - math.log2(lim.min_normal)))
    x = min(max(x, lim.min_normal), lim.max_normal)
    x = -x if negative else x
    assert abs(quantize(x, cfg(fmt)) - x) / abs(x) <= 2.0 ** -(fmt.significand_bits + 1)


@given(formats, st.integers(0, 255))
def test_roundtrip_codewords(fmt, raw):
    assume(raw != fmt.nan_codeword)
    assert encode(decode(raw, fmt), cfg(fmt)).raw == raw


@settings(max_examples=20, deadline=None)
@given(formats, st.floats(min_value=0.05, max_value=0.95), st.integers(0, 2**32 - 1))
def test_stochastic_unbiased(fmt, frac, seed):
    table = enumerate_values(fmt)
    positive = table[table > 0]
    i = len(positive) // 2
    lo, hi = positive[i], positive[i + 1]
    x = lo + frac * (hi - lo)
    draws = quantize_array(np.full(100_000, x), cfg(fmt, "stochastic"), np.random.default_rng(seed))
    stderr = (hi - lo) * math.sqrt(frac * (1 - frac) / draws.size)
    assert abs(draws.mean() - x) <= 4 * stderr


def test_stochastic_error_z_scores_are_standard_normal():
    # Calibration over many independent targets: the per-target z statistic of
    # the sample mean should look standard normal if rounding is unbiased.
    fmt = make_format(4, 3)
    table = enumerate_values(fmt)
    positive = table[table > 0]
    rng = np.random.default_rng(11)
    zs = []
    for _ in range(200):
        i = int(rng.integers(0, len(positive) - 1))
        x = positive[i] + rng.uniform(0.05, 0.95) * (positive[i + 1] - positive[i])
        d = quantize_array(np.full(10_000, x), cfg(fmt, "stochastic"), rng)
        zs.append((d.mean() - x) / (d.std(ddof=1) / math.sqrt(d.size)))
    zs = np.array(zs)
    assert abs(zs.mean()) < 0.25
    assert 0.85 < zs.std() < 1.15
