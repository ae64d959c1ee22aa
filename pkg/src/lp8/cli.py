"""``lp8`` command-line entry point.

Single-object results are printed as JSON (``"schema": 1``); sweeps and
traces are printed as CSV. Usage errors exit with status 2, domain errors
with status 1 and a JSON diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import histogram, noise, scaling, tensorio, trainer
from .formats import FormatError, Overflow, QuantizerConfig, Rounding, parse_format, quantize_tensor

SCHEMA = 1
SEED_ENV = "LP8_SEED"


class UsageError(Exception):
    pass


def _emit_json(obj, out) -> None:
    out.write(json.dumps({"schema": SCHEMA, **obj}, sort_keys=False) + "\n")


def _resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        raise UsageError(f"--seed is required (or set {SEED_ENV})")
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None


# -- recipe parsing -----------------------------------------------------------------


def parse_site_config(text: str) -> QuantizerConfig | None:
    """``1.4.3:b7`` with optional ``/nan`` (signal overflow) and ``/sr`` suffixes."""
    head, *flags = text.strip().split("/")
    if head.lower() in ("none", "fp32", "fp64", ""):
        return None
    rounding, overflow = Rounding.NEAREST_EVEN, Overflow.CLIP
    for flag in flags:
        flag = flag.strip().lower()
        if flag in ("nan", "signal"):
            overflow = Overflow.SIGNAL_NAN
        elif flag in ("clip",):
            overflow = Overflow.CLIP
        elif flag in ("sr", "stochastic"):
            rounding = Rounding.STOCHASTIC
        elif flag in ("rne", "nearest"):
            rounding = Rounding.NEAREST_EVEN
        else:
            raise FormatError(f"unknown quantizer flag {flag!r} in {text!r}")
    return QuantizerConfig(parse_format(head), rounding, overflow)


_BOOL = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}


def recipe_from_mapping(mapping: dict) -> trainer.QuantRecipe:
    kwargs = {}
    for key, value in mapping.items():
        key = key.strip()
        if key in trainer.SITES:
            kwargs[trainer.SITES[key]] = None if value is None else parse_site_config(str(value))
        elif key in ("first_input", "quantize_first_layer_input"):
            kwargs["quantize_first_layer_input"] = _BOOL[str(value).lower()]
        elif key in ("first_grad", "quantize_first_layer_grad"):
            kwargs["quantize_first_layer_grad"] = _BOOL[str(value).lower()]
        elif key in ("scaler", "loss_scaler"):
            name, _, arg = str(value).partition(":")
            kwargs["loss_scaler"] = name
            if arg:
                kwargs["loss_scale_log2"] = int(arg)
        elif key == "loss_scale_log2":
            kwargs["loss_scale_log2"] = int(value)
        elif key in ("c", "logmax_c"):
            kwargs["logmax_c"] = float(value)
        elif key in ("decay", "logmax_decay"):
            kwargs["logmax_decay"] = float(value)
        elif key in ("patience", "backoff_patience"):
            kwargs["backoff_patience"] = int(value)
        else:
            raise FormatError(f"unknown recipe key {key!r}")
    return trainer.QuantRecipe(**kwargs)


def parse_recipe(text: str) -> trainer.QuantRecipe:
    """A JSON file path, inline JSON, or ``site=fmt,...`` pairs."""
    text = text.strip()
    if text.lower() in ("fp32", "fp64", "none", ""):
        return trainer.QuantRecipe()
    if os.path.isfile(text):
        with open(text) as fh:
            return recipe_from_mapping(json.load(fh))
    if text.startswith("{"):
        return recipe_from_mapping(json.loads(text))
    pairs = {}
    for item in text.split(","):
        key, sep, value = item.partition("=")
        if not sep:
            raise FormatError(f"recipe item {item!r} is not key=value")
        pairs[key] = value
    return recipe_from_mapping(pairs)


# -- subcommands --------------------------------------------------------------------


def _report_target(name: str):
    if name in noise.REFERENCE_FORMATS and not name.startswith("1."):
        return noise.REFERENCE_FORMATS[name]
    return parse_format(name)


def cmd_format_report(args, out) -> None:
    names = list(args.formats)
    if args.reference:
        names += list(noise.REFERENCE_FORMATS)
    if not names:
        raise UsageError("give at least one format or --reference")
    for name in names:
        report = noise.format_report(_report_target(name)).to_dict()
        report["snr_db"] = report["snr_db_model"]
        out.write(json.dumps(report) + "\n")


def _config_from_args(args) -> QuantizerConfig:
    return QuantizerConfig(parse_format(args.format), args.rounding, args.overflow)


def cmd_quantize(args, out) -> None:
    config = _config_from_args(args)
    rng = None
    if config.rounding is Rounding.STOCHASTIC:
        rng = np.random.default_rng(_resolve_seed(args))
    data = tensorio.read_tensor(args.input)
    if not np.all(np.isfinite(data)):
        raise FormatError("input tensor contains non-finite values")
    q, flag = quantize_tensor(data, config, rng)
    tensorio.write_tensor(args.output, q)
    _emit_json({"format": str(config), "elements": int(q.size), "dims": list(q.shape), "overflow": bool(flag)}, out)


def _q_grid(args) -> np.ndarray:
    count = int(round((args.log2_hi - args.log2_lo) * args.points_per_octave)) + 1
    if count < 1:
        raise UsageError("--log2-hi must not be below --log2-lo")
    return np.exp2(np.linspace(args.log2_lo, args.log2_hi, count))


def _empirical_fixed(n: int, q: float, samples: int, seed: int) -> float:
    return noise.snr_db_empirical(noise.fixed_point_format(n, q), 1.0, samples, seed)


def cmd_snr_sweep(args, out) -> None:
    seed = _resolve_seed(args) if args.empirical else None
    writer = csv.writer(out, lineterminator="\n")
    header = ["q", "rounding_noise", "clipping_noise", "total", "snr_db"]
    if args.empirical:
        header.append("snr_db_empirical")
    writer.writerow(header)
    for row in noise.noise_components_fixed(_q_grid(args), args.bits):
        values = [repr(row.q), repr(row.rounding_noise), repr(row.clipping_noise), repr(row.total), repr(row.snr_db)]
        if args.empirical:
            values.append(repr(_empirical_fixed(args.bits, row.q, args.samples, seed)))
        writer.writerow(values)


def cmd_fixed_snr(args, out) -> None:
    q = math.ldexp(1.0, args.log2_q) if args.q is None else args.q
    result = asdict(noise.snr_db_fixed_model(q, args.bits))
    result["bits"] = args.bits
    if args.peak:
        q_peak, snr_peak = noise.peak_snr_fixed(args.bits)
        result.update(q_peak=q_peak, log2_q_peak=math.log2(q_peak), snr_db_peak=snr_peak)
    if args.empirical:
        seed = _resolve_seed(args)
        result.update(snr_db_empirical=_empirical_fixed(args.bits, q, args.samples, seed),
                      samples=args.samples, seed=seed, rng=noise.RNG_NAME)
    _emit_json(result, out)


def cmd_hist(args, out) -> None:
    h = histogram.exponent_histogram(tensorio.read_tensor(args.input))
    out.write(f"# zero_count={h.zero_count}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["exponent", "count"])
    for e, c in zip(h.exponents, h.counts):
        writer.writerow([int(e), int(c)])


def cmd_suggest_bias(args, out) -> None:
    fmt = parse_format(args.format)
    h = histogram.exponent_histogram(tensorio.read_tensor(args.input))
    bias = histogram.suggest_bias(h, fmt.exponent_bits, fmt.significand_bits, args.clip_quantile)
    chosen = fmt.with_bias(bias)
    _emit_json({"format": str(chosen), "bias": bias, "coverage": asdict(histogram.coverage(h, chosen))}, out)


def _read_trace(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.lstrip().startswith("#"))
        missing = {"step", "max_abs_grad", "overflow_flag"} - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"trace is missing columns {sorted(missing)}")
        for r in reader:
            flag = r["overflow_flag"].strip().lower()
            if flag not in _BOOL:
                raise FormatError(f"bad overflow_flag {r['overflow_flag']!r} at step {r['step']}")
            rows.append((int(r["step"]), float(r["max_abs_grad"]), _BOOL[flag]))
    return rows


def cmd_scale_sim(args, out) -> None:
    rows = _read_trace(args.trace)
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["step", "scale", "action"])
    if args.scaler == "backoff":
        state = scaling.BackoffState(scale=math.ldexp(1.0, args.init_log2), patience=args.patience)
        for step, _, flag in rows:
            state, action = scaling.backoff_step(state, flag)
            writer.writerow([step, repr(state.scale), action.value])
    else:
        state = scaling.LogMaxState.for_format(parse_format(args.format), c=args.c, decay=args.decay)
        for step, g, _ in rows:
            state, scale = scaling.logmax_step(state, g)
            writer.writerow([step, repr(scale), scaling.Action.APPLY.value])


def _parse_range(text: str) -> range:
    lo, sep, hi = text.partition("..")
    if not sep:
        raise UsageError(f"bias range {text!r} must look like lo..hi")
    try:
        lo_i, hi_i = int(lo), int(hi)
    except ValueError:
        raise UsageError(f"bias range {text!r} must hold integers") from None
    if hi_i < lo_i:
        raise UsageError(f"empty bias range {text!r}")
    return range(lo_i, hi_i + 1)


def _summary(accs) -> tuple[float, float, int]:
    arr = np.asarray(accs, dtype=np.float64)
    ok = arr[np.isfinite(arr)]
    diverged = int(arr.size - ok.size)
    if ok.size == 0:
        return math.nan, math.nan, diverged
    return float(ok.mean()), float(ok.std()), diverged


def cmd_train_demo(args, out) -> None:
    seed = _resolve_seed(args)
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    config = trainer.TrainConfig(epochs=args.epochs, seed=seed, recipe=parse_recipe(args.recipe),
                                 gain_octaves=args.gain_octaves, gain_dof=args.gain_dof, gain_clip=args.gain_clip)
    seeds = range(seed, seed + args.repeats)
    if args.sweep_bias:
        try:
            site, span = args.sweep_bias.split()
        except ValueError:
            raise UsageError("--sweep-bias takes a site and a lo..hi range") from None
        biases = _parse_range(span)
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["bias", "final_accuracy", "std", "diverged"])
        for b in biases:
            swept = replace(config, recipe=trainer.with_site_bias(config.recipe, site, b))
            mean, std, diverged = _summary(trainer.final_accuracies(swept, seeds))
            writer.writerow([b, repr(mean), repr(std), diverged])
        return
    if args.repeats == 1:
        t = trainer.train(config)
        _emit_json({"seed": seed, "final_accuracy": t.final_accuracy, "test_accuracy": t.test_accuracy,
                    "epoch_loss": t.epoch_loss, "overflow_steps": sum(t.overflow_steps),
                    "skipped_steps": sum(t.skipped_steps), "final_loss_scale": t.loss_scale[-1],
                    "param_digest": t.param_digest}, out)
        return
    accs = trainer.final_accuracies(config, seeds)
    mean, std, diverged = _summary(accs)
    _emit_json({"seeds": list(seeds), "final_accuracy": mean, "std": std, "diverged": diverged,
                "per_seed": [None if math.isnan(a) else a for a in accs]}, out)


# -- parser -------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lp8", description="8-bit floating-point formats, noise models and loss scaling.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("format-report", help="dynamic range and SNR model of formats")
    p.add_argument("formats", nargs="*", help="1.E.p[:bN] or float32/float16/bfloat16/dlfloat")
    p.add_argument("--reference", action="store_true", help="report the seven reference formats")
    p.set_defaults(func=cmd_format_report)

    p = sub.add_parser("quantize", help="quantize-dequantize a tensor file")
    p.add_argument("--format", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--rounding", choices=[r.value for r in Rounding], default=Rounding.NEAREST_EVEN.value)
    p.add_argument("--overflow", choices=[o.value for o in Overflow], default=Overflow.CLIP.value)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_quantize)

    for name, func, helptext in (("snr-sweep", cmd_snr_sweep, "fixed-point noise breakdown over a q grid"),
                                 ("fixed-snr", cmd_fixed_snr, "fixed-point SNR model at one step size")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--bits", type=int, default=7, help="magnitude bits n")
        p.add_argument("--empirical", action="store_true", help="add a Monte-Carlo estimate (needs --seed)")
        p.add_argument("--samples", type=int, default=10**6)
        p.add_argument("--seed", type=int)
        p.set_defaults(func=func)
        if name == "snr-sweep":
            p.add_argument("--log2-lo", type=float, default=-8.0)
            p.add_argument("--log2-hi", type=float, default=-2.0)
            p.add_argument("--points-per-octave", type=int, default=8)
        else:
            group = p.add_mutually_exclusive_group()
            group.add_argument("--q", type=float)
            group.add_argument("--log2-q", type=int, default=-5)
            p.add_argument("--peak", action="store_true", help="also report the grid peak")

    p = sub.add_parser("hist", help="octave histogram of a tensor file")
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_hist)

    p = sub.add_parser("suggest-bias", help="pick an exponent bias from a tensor's histogram")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", required=True, help="1.E.p; any bias given is ignored")
    p.add_argument("--clip-quantile", type=float, default=0.0)
    p.set_defaults(func=cmd_suggest_bias)

    p = sub.add_parser("scale-sim", help="replay a gradient trace through a loss-scale automaton")
    p.add_argument("--trace", required=True, help="CSV with step, max_abs_grad, overflow_flag")
    p.add_argument("--scaler", choices=["backoff", "logmax"], required=True)
    p.add_argument("--init-log2", type=int, default=15)
    p.add_argument("--patience", type=int, default=2000)
    p.add_argument("--format", default="1.5.2:b15", help="gradient format (logmax)")
    p.add_argument("--c", type=float, default=0.0)
    p.add_argument("--decay", type=float, default=0.9)
    p.set_defaults(func=cmd_scale_sim)

    p = sub.add_parser("train-demo", help="quantization-aware training on the synthetic task")
    p.add_argument("--recipe", default="fp32", help="JSON file, inline JSON or site=fmt pairs")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--sweep-bias", metavar="SITE LO..HI", help="e.g. --sweep-bias grad_x -16..16")
    p.add_argument("--gain-octaves", type=float, default=0.0, help="heavy-tailed activation gain width")
    p.add_argument("--gain-dof", type=float, default=1.0)
    p.add_argument("--gain-clip", type=int, default=60)
    p.set_defaults(func=cmd_train_demo)
    return parser


_DOMAIN_ERRORS = (FormatError, ValueError, KeyError, OSError, trainer.DivergenceError)


def _join_sweep_args(argv: list[str]) -> list[str]:
    # "--sweep-bias grad_x -16..16": argparse would take "-16..16" for a flag
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--sweep-bias" and i + 2 < len(argv) and not argv[i + 1].startswith("-"):
            out.append(f"--sweep-bias={argv[i + 1]} {argv[i + 2]}")
            i += 3
        else:
            out.append(argv[i])
            i += 1
    return out


def run(argv=None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    argv = _join_sweep_args(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args, out)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        err.write(str(exc).rstrip() + "\n")
        return 2
    except _DOMAIN_ERRORS as exc:
        err.write(json.dumps({"schema": SCHEMA, "error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
