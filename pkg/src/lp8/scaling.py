"""Automatic loss scaling: the Backoff and LogMax automata.

Multiplying the loss by ``2**k`` before backpropagation and dividing it out
at the weight update is the same as quantizing gradients with the bias
raised by ``k``; :func:`effective_bias` gives that bias.

Both automata are written as pure step functions over frozen states, so a
trace can be replayed or forked freely.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

__all__ = [
    "Action",
    "BackoffState",
    "LogMaxState",
    "backoff_step",
    "logmax_step",
    "effective_bias",
    "is_power_of_two",
]

BACKOFF_MAX_SCALE = 2.0**40


class Action(str, enum.Enum):
    APPLY = "apply-update"
    SKIP = "skip-update"


def is_power_of_two(x: float) -> bool:
    if not (x > 0 and math.isfinite(x)):
        return False
    mantissa, _ = math.frexp(x)
    return mantissa == 0.5


@dataclass(frozen=True)
class BackoffState:
    scale: float = 2.0**15
    good_steps: int = 0
    decrease_factor: float = 2.0
    increase_factor: float = 2.0
    patience: int = 2000
    max_scale: float = BACKOFF_MAX_SCALE

    def __post_init__(self):
        if not is_power_of_two(self.scale):
            raise ValueError(f"loss scale {self.scale} is not a power of two")


def backoff_step(s: BackoffState, overflow: bool) -> tuple[BackoffState, Action]:
    """Halve and skip on overflow; double after ``patience`` clean steps."""
    if overflow:
        return replace(s, scale=s.scale / s.decrease_factor, good_steps=0), Action.SKIP
    good = s.good_steps + 1
    if good >= s.patience:
        return replace(s, scale=min(s.scale * s.increase_factor, s.max_scale), good_steps=0), Action.APPLY
    return replace(s, good_steps=good), Action.APPLY


@dataclass(frozen=True)
class LogMaxState:
    """Running statistics of ``log2 max|grad_w|`` per mini-batch.

    ``mu`` and ``var`` are exponential moving averages with weight ``decay``
    on the history; the first observation initialises ``mu`` with ``var = 0``.
    ``max_log2`` is ``log2`` of the largest value of the gradient format.
    """

    max_log2: float
    c: float = 0.0
    decay: float = 0.9
    mu: float = 0.0
    var: float = 0.0
    count: int = 0
    scale: float = 1.0

    @classmethod
    def for_format(cls, fmt, **kwargs) -> "LogMaxState":
        return cls(max_log2=math.log2(fmt.limits.max_normal), **kwargs)

    @property
    def sigma(self) -> float:
        return math.sqrt(self.var)

    def target_scale(self) -> float:
        return math.ldexp(1.0, math.floor(self.max_log2 - (self.mu + self.c * self.sigma)))


def logmax_step(s: LogMaxState, batch_max_abs_grad: float) -> tuple[LogMaxState, float]:
    """Fold one batch maximum (of the *unscaled* gradient) into the state."""
    g = float(batch_max_abs_grad)
    if g == 0.0:
        return s, s.scale
    if not (g > 0.0 and math.isfinite(g)):
        raise ValueError(f"batch max |grad| must be positive and finite, got {g}")
    x = math.log2(g)
    if s.count == 0:
        mu, var = x, 0.0
    else:
        diff = x - s.mu
        mu = s.mu + (1.0 - s.decay) * diff
        var = s.decay * (s.var + (1.0 - s.decay) * diff * diff)
    new = replace(s, mu=mu, var=var, count=s.count + 1)
    new = replace(new, scale=new.target_scale())
    return new, new.scale


def effective_bias(scale: float, base_bias: int) -> int:
    """Gradient bias equivalent to quantizing ``scale * grad`` at ``base_bias``."""
    if not is_power_of_two(scale):
        raise ValueError(f"loss scale {scale} is not a power of two")
    return base_bias + math.frexp(scale)[1] - 1
