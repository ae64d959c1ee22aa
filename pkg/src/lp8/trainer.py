"""Quantization-aware training of a small ReLU MLP with hand-written backprop.

Quantizer placement follows the usual mixed-precision layout for a fully
connected layer ``z = x @ W + b``:

forward
    ``Q_act(x)`` and ``Q_w(W)`` feed the matmul; the bias stays unquantized.
    The input of the first layer is exempt unless
    ``quantize_first_layer_input`` is set.
backward
    the gradient w.r.t. the layer output ``dz`` is quantized with ``Q_gx``
    before it enters the two backward matmuls (``dW = Q_act(x).T @ Q(dz)``
    and ``dx = Q(dz) @ Q_w(W).T``). The first layer's ``dz`` is exempt unless
    ``quantize_first_layer_grad`` is set. ``dW`` is quantized with ``Q_gw``
    before the optimizer sees it.

Matmul accumulation, the loss, the optimizer and the master weights stay in
float64. Loss scaling multiplies ``dL/dlogits`` by the scale; the optimizer
divides it out exactly, so only powers of two are accepted.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .formats import QuantizerConfig, quantize_tensor
from .scaling import Action, BackoffState, LogMaxState, backoff_step, is_power_of_two, logmax_step

__all__ = [
    "DivergenceError",
    "QuantRecipe",
    "MLPModel",
    "TrainConfig",
    "MetricsTrace",
    "SiteStats",
    "make_blobs",
    "init_model",
    "forward",
    "forward_backward",
    "sgd_momentum_step",
    "evaluate",
    "train",
    "final_accuracies",
    "with_site_bias",
]

LOSS_SCALERS = ("none", "fixed", "backoff", "logmax")
SITES = {"act": "act_config", "weight": "weight_config", "grad_x": "grad_x_config", "grad_w": "grad_w_config"}


class DivergenceError(RuntimeError):
    """Training loss became non-finite without a loss scaler to absorb it."""


@dataclass(frozen=True)
class QuantRecipe:
    """Which quantizer runs at each site; ``None`` keeps float64 there.

    ``loss_scaler`` is one of ``"none"``, ``"fixed"`` (scale
    ``2**loss_scale_log2``), ``"backoff"`` (initial scale
    ``2**loss_scale_log2``) or ``"logmax"`` (with multiplier ``logmax_c``).
    """

    act_config: QuantizerConfig | None = None
    weight_config: QuantizerConfig | None = None
    grad_x_config: QuantizerConfig | None = None
    grad_w_config: QuantizerConfig | None = None
    quantize_first_layer_input: bool = False
    quantize_first_layer_grad: bool = False
    loss_scaler: str = "none"
    loss_scale_log2: int = 0
    logmax_c: float = 0.0
    logmax_decay: float = 0.9
    backoff_patience: int = 2000

    def __post_init__(self):
        if self.loss_scaler not in LOSS_SCALERS:
            raise ValueError(f"loss_scaler must be one of {LOSS_SCALERS}, got {self.loss_scaler!r}")
        if self.loss_scaler == "backoff" and self.loss_scale_log2 == 0:
            object.__setattr__(self, "loss_scale_log2", 15)


@dataclass
class MLPModel:
    """Float64 master weights and zero-initialised momentum buffers."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    vel_w: list[np.ndarray] = field(default_factory=list)
    vel_b: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError(f"layer shapes {a.shape} and {b.shape} do not chain")
        if not self.vel_w:
            self.vel_w = [np.zeros_like(w) for w in self.weights]
            self.vel_b = [np.zeros_like(b) for b in self.biases]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MLPModel":
        return MLPModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        [v.copy() for v in self.vel_w], [v.copy() for v in self.vel_b])

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in self.weights + self.biases:
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class TrainConfig:
    layer_sizes: tuple[int, ...] = (16, 32, 32, 4)
    batch_size: int = 32
    base_lr: float = 2.0**-9
    momentum: float = 0.9
    weight_decay: float = 2e-4
    epochs: int = 30
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    lr_decay: float = 0.1
    seed: int = 0
    recipe: QuantRecipe = field(default_factory=QuantRecipe)
    data_seed: int = 0
    n_train: int = 4096
    n_test: int = 1024
    data_radius: float = 4.0
    # Heavy-tailed per-sample gains during training (see forward_backward):
    # 2**round(gain_octaves * t), t ~ Student-t(gain_dof), exponent clipped to
    # +-gain_clip octaves; drawn independently per layer in ``gain_layers``.
    gain_octaves: float = 0.0
    gain_dof: float = 1.0
    gain_clip: int = 60
    gain_layers: tuple[int, ...] = (1, 2)

    @property
    def lr(self) -> float:
        return self.batch_size * self.base_lr

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.base_lr <= 0:
            raise ValueError("batch_size, epochs and base_lr must be positive")
        if list(self.lr_milestones) != sorted(self.lr_milestones) or any(not 0 < m < 1 for m in self.lr_milestones):
            raise ValueError("lr_milestones must be sorted fractions in (0, 1)")


@dataclass
class SiteStats:
    """Per-site tensors seen by the quantizers in one forward/backward."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    overflow: dict[str, bool] = field(default_factory=dict)
    # max |dL/dW| over all layers before quantization, loss scale included
    grad_w_max_abs: float = 0.0

    @property
    def any_overflow(self) -> bool:
        return any(self.overflow.values())

    @property
    def grad_overflow(self) -> bool:
        return any(v for k, v in self.overflow.items() if k.startswith("grad"))


@dataclass
class MetricsTrace:
    epoch_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)
    overflow_steps: list[int] = field(default_factory=list)
    skipped_steps: list[int] = field(default_factory=list)
    loss_scale: list[float] = field(default_factory=list)
    param_digest: str = ""

    @property
    def final_accuracy(self) -> float:
        return self.test_accuracy[-1]


# -- data and model -------------------------------------------------------------


def make_blobs(n_train: int = 4096, n_test: int = 1024, dim: int = 16, classes: int = 4,
               seed: int = 0, radius: float = 4.0) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Seeded Gaussian-blobs classification task: ``(x_train, y_train, x_test, y_test)``.

    Class means are drawn once per seed with norm ``radius``; samples add unit
    isotropic noise, so neighbouring classes overlap a little.
    """
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, dim))
    centers *= radius / np.linalg.norm(centers, axis=1, keepdims=True)

    def draw(n):
        y = rng.integers(0, classes, n)
        return centers[y] + rng.standard_normal((n, dim)), y

    x_train, y_train = draw(n_train)
    x_test, y_test = draw(n_test)
    return x_train, y_train, x_test, y_test


def init_model(layer_sizes, rng: np.random.Generator) -> MLPModel:
    """He-normal weights, zero biases."""
    weights = [rng.standard_normal((i, o)) * math.sqrt(2.0 / i) for i, o in zip(layer_sizes, layer_sizes[1:])]
    biases = [np.zeros(o) for o in layer_sizes[1:]]
    return MLPModel(weights, biases)


# -- forward / backward -----------------------------------------------------------


def _q(x, config, rng, name, stats):
    if config is None:
        return x
    out, flag = quantize_tensor(x, config, rng)
    stats.tensors[name] = out
    stats.overflow[name] = flag
    return out


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _forward(model, x, recipe, rng, stats, gains=None):
    inputs, wq, pre = [], [], []
    a = x
    last = model.num_layers - 1
    for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
        g = None if gains is None else gains.get(layer)
        if g is not None:
            a = a * g
        if layer > 0 or recipe.quantize_first_layer_input:
            a = _q(a, recipe.act_config, rng, f"act{layer}", stats)
        wl = _q(w, recipe.weight_config, rng, f"weight{layer}", stats)
        u = a @ wl
        z = (u if g is None else u / g) + b
        inputs.append(a)
        wq.append(wl)
        pre.append(z)
        a = z if layer == last else np.maximum(z, 0.0)
    return a, inputs, wq, pre


def forward(model: MLPModel, x, recipe: QuantRecipe | None = None, rng=None) -> np.ndarray:
    """Logits for ``x`` under ``recipe`` (unquantized when ``None``)."""
    logits, *_ = _forward(model, np.asarray(x, dtype=np.float64), recipe or QuantRecipe(), rng, SiteStats())
    return logits


def forward_backward(model: MLPModel, batch, recipe: QuantRecipe, rng=None, loss_scale: float = 1.0,
                     gains: dict[int, np.ndarray] | None = None):
    """Mean softmax cross-entropy and its (still loss-scaled) gradients.

    Returns ``(loss, (grad_w, grad_b), stats)``. ``loss`` is unscaled; the
    gradients carry the factor ``loss_scale`` for the optimizer to remove.

    ``gains`` maps a layer index to per-sample power-of-two factors ``g`` (a
    column vector): that layer computes ``(Q(g*x) @ Q(W)) / g + b``. In exact
    arithmetic this is a no-op, but the quantizers see activations scaled by
    ``g`` and matmul-output gradients scaled by ``1/g``, as in a network whose
    per-sample normalization absorbs a varying gain.
    """
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    stats = SiteStats()
    logits, inputs, wq, pre = _forward(model, x, recipe, rng, stats, gains)
    m = x.shape[0]
    rows = np.arange(m)
    logp = _log_softmax(logits)
    loss = float(-np.mean(logp[rows, y]))
    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    dz *= loss_scale / m
    grad_w = [None] * model.num_layers
    grad_b = [None] * model.num_layers
    for layer in range(model.num_layers - 1, -1, -1):
        g = None if gains is None else gains.get(layer)
        du = dz if g is None else dz / g
        if layer > 0 or recipe.quantize_first_layer_grad:
            du = _q(du, recipe.grad_x_config, rng, f"grad_x{layer}", stats)
        gw = inputs[layer].T @ du
        stats.grad_w_max_abs = max(stats.grad_w_max_abs, float(np.max(np.abs(gw))))
        grad_w[layer] = _q(gw, recipe.grad_w_config, rng, f"grad_w{layer}", stats)
        grad_b[layer] = (du if g is None else du * g).sum(axis=0)
        if layer > 0:
            da = du @ wq[layer].T
            if g is not None:
                da = da * g
            dz = da * (pre[layer - 1] > 0)
    return loss, (grad_w, grad_b), stats


def sgd_momentum_step(model: MLPModel, grads, lr: float, momentum: float, weight_decay: float,
                      loss_scale: float = 1.0) -> None:
    """In-place ``v = a*v + (g/scale + wd*w); w -= lr*v`` on the master copy.

    Weight decay applies to weight matrices, not to biases.
    """
    if not is_power_of_two(loss_scale):
        raise ValueError(f"loss scale {loss_scale} is not a power of two")
    grad_w, grad_b = grads
    for i in range(model.num_layers):
        w, b = model.weights[i], model.biases[i]
        model.vel_w[i] = momentum * model.vel_w[i] + (grad_w[i] / loss_scale + weight_decay * w)
        model.vel_b[i] = momentum * model.vel_b[i] + grad_b[i] / loss_scale
        w -= lr * model.vel_w[i]
        b -= lr * model.vel_b[i]


def evaluate(model: MLPModel, x, y, recipe: QuantRecipe | None = None) -> float:
    """Accuracy with the forward quantizers of ``recipe`` (nearest-even only)."""
    if recipe is not None:
        recipe = replace(recipe, act_config=_deterministic(recipe.act_config),
                         weight_config=_deterministic(recipe.weight_config))
    return float(np.mean(np.argmax(forward(model, x, recipe), axis=1) == y))


def _deterministic(config):
    if config is None or config.rounding.value == "nearest":
        return config
    return QuantizerConfig(config.format, "nearest", config.overflow)


def _lr_at(config: TrainConfig, step: int, total: int) -> float:
    lr = config.lr
    for milestone in config.lr_milestones:
        if step >= milestone * total:
            lr *= config.lr_decay
    return lr


def _draw_gains(config: TrainConfig, rng, m: int):
    if not config.gain_octaves:
        return None
    gains = {}
    for layer in config.gain_layers:
        t = rng.standard_t(config.gain_dof, size=(m, 1))
        gains[layer] = np.exp2(np.clip(np.round(config.gain_octaves * t), -config.gain_clip, config.gain_clip))
    return gains


def train(config: TrainConfig) -> MetricsTrace:
    """Train on the built-in blobs task; deterministic given the config."""
    recipe = config.recipe
    x_train, y_train, x_test, y_test = make_blobs(config.n_train, config.n_test,
                                                  config.layer_sizes[0], config.layer_sizes[-1], config.data_seed,
                                                  config.data_radius)
    rng = np.random.default_rng(config.seed)
    model = init_model(config.layer_sizes, rng)
    quant_rng = np.random.default_rng([config.seed, 1])
    gain_rng = np.random.default_rng([config.seed, 2])

    scale = 1.0
    backoff = logmax = None
    if recipe.loss_scaler == "fixed":
        scale = math.ldexp(1.0, recipe.loss_scale_log2)
    elif recipe.loss_scaler == "backoff":
        backoff = BackoffState(scale=math.ldexp(1.0, recipe.loss_scale_log2), patience=recipe.backoff_patience)
        scale = backoff.scale
    elif recipe.loss_scaler == "logmax":
        if recipe.grad_w_config is None:
            raise ValueError("logmax needs a gradient format to aim at")
        logmax = LogMaxState.for_format(recipe.grad_w_config.format, c=recipe.logmax_c, decay=recipe.logmax_decay)

    n = len(x_train)
    steps_per_epoch = n // config.batch_size
    total = steps_per_epoch * config.epochs
    trace = MetricsTrace()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses, overflow_steps, skipped = [], 0, 0
        for k in range(steps_per_epoch):
            idx = order[k * config.batch_size:(k + 1) * config.batch_size]
            gains = _draw_gains(config, gain_rng, len(idx))
            loss, grads, stats = forward_backward(model, (x_train[idx], y_train[idx]), recipe, quant_rng, scale, gains)
            trace.loss_scale.append(scale)
            overflow = stats.grad_overflow
            overflow_steps += overflow
            finite = all(np.all(np.isfinite(g)) for g in grads[0] + grads[1])
            if backoff is not None:
                backoff, action = backoff_step(backoff, overflow or not finite)
                if action is Action.APPLY:
                    sgd_momentum_step(model, grads, _lr_at(config, step, total), config.momentum,
                                      config.weight_decay, scale)
                else:
                    skipped += 1
                scale = backoff.scale
            else:
                if not (math.isfinite(loss) and finite):
                    raise DivergenceError(
                        f"non-finite loss or gradient at epoch {epoch}, step {step} "
                        f"(loss={loss}, recipe grad_x={recipe.grad_x_config})")
                sgd_momentum_step(model, grads, _lr_at(config, step, total), config.momentum,
                                  config.weight_decay, scale)
                if logmax is not None:
                    logmax, scale = logmax_step(logmax, stats.grad_w_max_abs / scale)
            if math.isfinite(loss):
                losses.append(loss)
            step += 1
        if not all(np.all(np.isfinite(w)) for w in model.weights):
            raise DivergenceError(f"master weights became non-finite in epoch {epoch}")
        trace.epoch_loss.append(float(np.mean(losses)) if losses else math.nan)
        trace.train_accuracy.append(evaluate(model, x_train, y_train, recipe))
        trace.test_accuracy.append(evaluate(model, x_test, y_test, recipe))
        trace.overflow_steps.append(int(overflow_steps))
        trace.skipped_steps.append(skipped)
    trace.param_digest = model.digest()
    return trace


def final_accuracies(config: TrainConfig, seeds) -> list[float]:
    """Final test accuracy per seed; a diverged run contributes NaN."""
    out = []
    for seed in seeds:
        try:
            out.append(train(replace(config, seed=int(seed))).final_accuracy)
        except DivergenceError:
            out.append(math.nan)
    return out


def with_site_bias(recipe: QuantRecipe, site: str, bias: int) -> QuantRecipe:
    """Copy of ``recipe`` with the format bias at ``site`` replaced."""
    key = SITES.get(site)
    if key is None:
        raise ValueError(f"unknown site {site!r}; expected one of {sorted(SITES)}")
    config = getattr(recipe, key)
    if config is None:
        raise ValueError(f"site {site!r} is not quantized in this recipe")
    return replace(recipe, **{key: config.with_bias(bias)})
