"""Configurable 8-bit floating-point formats for quantized training.

The submodules are :mod:`lp8.formats` (number formats and the codec),
:mod:`lp8.noise` (range and SNR models), :mod:`lp8.histogram` (octave
histograms and bias selection), :mod:`lp8.scaling` (loss-scale automata),
:mod:`lp8.trainer` (a small quantization-aware MLP trainer) and
:mod:`lp8.cli`.
"""

from .formats import (
    Codeword,
    FloatFormat,
    FormatError,
    FormatLimits,
    MissingRngError,
    Overflow,
    QuantizerConfig,
    Rounding,
    decode,
    encode,
    enumerate_values,
    format_limits,
    make_format,
    parse_format,
    quantize,
    quantize_array,
    quantize_tensor,
)
from .histogram import ExponentHistogram, coverage, exponent_histogram, suggest_bias
from .noise import (
    dynamic_range_db_fixed,
    dynamic_range_db_float,
    snr_db_empirical,
    snr_db_fixed_model,
    snr_db_float_model,
)
from .scaling import BackoffState, LogMaxState, backoff_step, effective_bias, logmax_step

__version__ = "0.1.0"
