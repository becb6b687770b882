"""Command-line entry point: synth | train | eval | forecast | gradcheck | robustness.

One flat config file (key = value) plus flag overrides describes a run;
flags win.  All randomness descends from the single `seed` key through
named substreams, so every command is reproducible byte for byte.  Exit
codes are stable for scripting: 0 success, 1 usage or config error,
2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import dataclass, fields
from fractions import Fraction
from typing import Optional

import numpy as np

from . import spline
from .data import (
    FlowDataset,
    inject_missing,
    inject_zeros,
    load_flow_csv,
    make_windows,
    save_flow_csv,
    summarize,
    synth_generate,
)
from .errors import ConfigError, DataError, NumericsError
from .model import (
    VARIANTS,
    ModelConfig,
    ModelParams,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    Normalizer,
    evaluate,
    loss_curve_csv,
    predict,
    train,
)

_thread_controller = None  # keeps a threadpool limit alive for the process


def _cap_threads() -> None:
    raw = os.environ.get("MNDE_THREADS")
    if not raw:
        return
    try:
        k = int(raw)
    except ValueError:
        raise ConfigError(f"MNDE_THREADS must be an integer, got {raw!r}")
    if k < 1:
        raise ConfigError(f"MNDE_THREADS must be >= 1, got {k}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(k))
    global _thread_controller
    try:
        from threadpoolctl import threadpool_limits
        _thread_controller = threadpool_limits(limits=k)
    except ImportError:
        pass  # env vars above still cap libraries loaded later


# ---------------------------------------------------------------------------
# run configuration


def _parse_fraction(s: str) -> Fraction:
    try:
        return Fraction(s)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"expected a fraction like 1/3, got {s!r}")


def _parse_variant(s: str) -> str:
    if s not in VARIANTS:
        raise ConfigError(f"unknown variant {s!r}; expected one of {VARIANTS}")
    return s


def _parse_checkpoints(s: str) -> tuple:
    try:
        return tuple(int(p) for p in s.split(","))
    except ValueError:
        raise ConfigError(f"checkpoints must be comma-separated integers, got {s!r}")


def _parse_int(s: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise ConfigError(f"expected an integer, got {s!r}")


def _parse_float(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"expected a number, got {s!r}")


@dataclass
class RunConfig:
    """One experiment: data source, architecture, and optimization choices."""

    dataset: Optional[str] = None
    n: Optional[int] = None
    l: int = 12
    l_prime: int = 96
    c: int = 64
    c_prime: int = 32
    d: int = 2
    h: int = 4
    loops: int = 3
    r: Fraction = Fraction(1, 3)
    r_prime: Fraction = Fraction(1, 3)
    step: Fraction = Fraction(1, 3)
    lr: float = 1e-3
    weight_decay: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    delta: float = 1.0
    seed: int = 0
    variant: str = "MNDE"
    checkpoints: tuple = (23, 47, 95)
    missing_rate: float = 0.0
    zero_rate: float = 0.0

    def model_config(self, n: int) -> ModelConfig:
        return ModelConfig(n=n, l=self.l, l_prime=self.l_prime, c=self.c,
                           c_prime=self.c_prime, d=self.d, heads=self.h,
                           loops=self.loops, r=self.r, r_prime=self.r_prime,
                           step=self.step)


_CONFIG_PARSERS = {
    "dataset": str,
    "n": _parse_int,
    "l": _parse_int,
    "l_prime": _parse_int,
    "c": _parse_int,
    "c_prime": _parse_int,
    "d": _parse_int,
    "h": _parse_int,
    "loops": _parse_int,
    "r": _parse_fraction,
    "r_prime": _parse_fraction,
    "step": _parse_fraction,
    "lr": _parse_float,
    "weight_decay": _parse_float,
    "batch_size": _parse_int,
    "epochs": _parse_int,
    "delta": _parse_float,
    "seed": _parse_int,
    "variant": _parse_variant,
    "checkpoints": _parse_checkpoints,
    "missing_rate": _parse_float,
    "zero_rate": _parse_float,
}

CONFIG_KEYS = tuple(_CONFIG_PARSERS)
assert set(CONFIG_KEYS) == {f.name for f in fields(RunConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat key = value lines; '#' comments; unknown keys are rejected."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source} line {lineno}: expected key = value, got {raw!r}")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_PARSERS:
            raise ConfigError(f"{source} line {lineno}: unknown config key {key!r}")
        values[key] = _CONFIG_PARSERS[key](value)
    return values


def load_run_config(path: Optional[str], overrides: dict) -> RunConfig:
    values = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        values.update(parse_config_text(text, source=path))
    for key, raw in overrides.items():
        values[key] = _CONFIG_PARSERS[key](raw)
    return RunConfig(**values)


def _config_from_args(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in CONFIG_KEYS if getattr(args, k, None) is not None}
    return load_run_config(args.config, overrides)


# ---------------------------------------------------------------------------
# shared plumbing


def _atomic_write(path: str, writer, binary: bool = False) -> None:
    """Write via a sibling temp file and rename, so readers never see a torn file."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".mnde-tmp-")
    try:
        with os.fdopen(fd, "wb" if binary else "w") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _emit(path: Optional[str], text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        _atomic_write(path, lambda fh: fh.write(text))


def _load_dataset(cfg: RunConfig) -> FlowDataset:
    if cfg.dataset is None:
        raise ConfigError("config needs a dataset path (key: dataset)")
    return load_flow_csv(cfg.dataset)


def _check_n(cfg_n: Optional[int], ds: FlowDataset) -> int:
    if cfg_n is not None and cfg_n != ds.n:
        raise ConfigError(f"config says n={cfg_n} but dataset has {ds.n} locations")
    return ds.n


def _fill_gaps(ds: FlowDataset) -> FlowDataset:
    """Dataset-level spline repair so every window sees complete rows."""
    if not np.isnan(ds.values).any():
        return ds
    return FlowDataset(spline.fill_missing(ds.values), ds.interval_minutes)


def _corrupt_inputs(ds: FlowDataset, missing_rate: float, zero_rate: float,
                    seed: int) -> FlowDataset:
    out = ds
    if zero_rate > 0.0:
        out = inject_zeros(out, zero_rate, seed)
    if missing_rate > 0.0:
        out = inject_missing(out, missing_rate, seed)
    return _fill_gaps(out)


def _split_arrays(ds_targets: FlowDataset, ds_inputs: FlowDataset,
                  l: int, l_prime: int, split: Optional[str]):
    """Window a split, drawing inputs and targets from aligned datasets."""
    wins = make_windows(ds_targets, l, l_prime, split=split)
    x = np.stack([ds_inputs.values[:, w.origin:w.origin + l] for w in wins])
    y = np.stack([w.target for w in wins])
    return x, y


def _eval_report(params: ModelParams, norm: Normalizer, ds_clean: FlowDataset,
                 cfg: RunConfig, split: str,
                 missing_rate: float, zero_rate: float) -> dict:
    ds_inputs = _corrupt_inputs(ds_clean, missing_rate, zero_rate, cfg.seed)
    x, y = _split_arrays(ds_clean, ds_inputs, params.cfg.l, params.cfg.l_prime, split)
    if np.isnan(y).any():
        raise DataError("evaluation targets contain missing values; "
                        "evaluate against a complete dataset")
    report = evaluate(params, x, y, norm, checkpoints=cfg.checkpoints,
                      batch_size=cfg.batch_size)
    return report.to_jsonable()


def _read_checkpoint(path: str):
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}")
    with fh:
        params, norm_mean, norm_std = load_checkpoint(fh)
    return params, Normalizer(norm_mean, norm_std)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    out_path = args.out or cfg.dataset
    if out_path is None:
        raise ConfigError("synth needs --out or a dataset path in the config")
    if cfg.n is None:
        raise ConfigError("synth needs n (locations)")
    ds = synth_generate(cfg.n, args.days, cfg.seed, scenario=args.scenario,
                        tau=args.tau, noise=args.noise)
    _atomic_write(out_path, lambda fh: save_flow_csv(ds, fh))
    for key, value in summarize(ds).items():
        print(f"{key}={value}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    ds = _load_dataset(cfg)
    n = _check_n(cfg.n, ds)
    if cfg.missing_rate > 0.0:
        ds = inject_missing(ds, cfg.missing_rate, cfg.seed)
    if cfg.zero_rate > 0.0:
        ds = inject_zeros(ds, cfg.zero_rate, cfg.seed)
    norm = Normalizer.fit(ds.split_values("train"))
    ds = _fill_gaps(ds)

    model_cfg = cfg.model_config(n)
    params = ModelParams.init(model_cfg, cfg.variant, cfg.seed)
    if cfg.epochs == 0:
        result = train(params, None, None, None, None, epochs=0)
    else:
        xt, yt = _split_arrays(ds, ds, cfg.l, cfg.l_prime, "train")
        xv, yv = _split_arrays(ds, ds, cfg.l, cfg.l_prime, "val")
        result = train(params,
                       norm.apply(xt), norm.apply(yt),
                       norm.apply(xv), norm.apply(yv),
                       epochs=cfg.epochs, batch_size=cfg.batch_size,
                       seed=cfg.seed, lr=cfg.lr, weight_decay=cfg.weight_decay,
                       delta=cfg.delta, patience=args.patience,
                       log=(print if args.verbose else None))
    _atomic_write(args.out,
                  lambda fh: save_checkpoint(fh, result.params, norm.mean, norm.std),
                  binary=True)
    curve_path = args.curve or args.out + ".loss.csv"
    _atomic_write(curve_path, lambda fh: fh.write(loss_curve_csv(result.curve)))
    print(f"wrote {args.out} ({cfg.variant}, {len(result.curve)} epochs, "
          f"best epoch {result.best_epoch})")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    params, norm = _read_checkpoint(args.checkpoint)
    ds = _load_dataset(cfg)
    _check_n(params.cfg.n, ds)
    blob = {
        "variant": params.variant,
        "split": args.split,
        "missing_rate": cfg.missing_rate,
        "zero_rate": cfg.zero_rate,
    }
    blob.update(_eval_report(params, norm, ds, cfg, args.split,
                             cfg.missing_rate, cfg.zero_rate))
    _emit(args.out, json.dumps(blob, indent=2))
    return 0


def cmd_forecast(args) -> int:
    cfg = _config_from_args(args)
    params, norm = _read_checkpoint(args.checkpoint)
    ds = load_flow_csv(args.input)
    if ds.n != params.cfg.n:
        raise DataError(f"input has {ds.n} locations, checkpoint expects {params.cfg.n}")
    if ds.total != params.cfg.l:
        raise DataError(f"input must hold exactly the last {params.cfg.l} intervals, "
                        f"got {ds.total}")
    del cfg  # forecasting is fully determined by the checkpoint
    pred = norm.invert(predict(params, norm.apply(ds.values)[None])[0])
    out = FlowDataset(pred, ds.interval_minutes)
    if args.out is None:
        save_flow_csv(out, sys.stdout)
    else:
        _atomic_write(args.out, lambda fh: save_flow_csv(out, fh))
    return 0


def cmd_gradcheck(args) -> int:
    from . import selfcheck
    if args.quick:
        results = (selfcheck.check_op_gradients() + selfcheck.check_spline()
                   + selfcheck.check_solver()
                   + selfcheck.check_model_gradients(params_limit=8))
    else:
        results = selfcheck.run_all()
    failures = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failures += not r.passed
        print(f"{r.name}: max_err={r.max_err:.6g} tol={r.tol:g} {status}")
    print(f"{len(results) - failures}/{len(results)} checks passed")
    if failures:
        raise NumericsError(f"{failures} verification checks failed")
    return 0


def cmd_robustness(args) -> int:
    cfg = _config_from_args(args)
    params, norm = _read_checkpoint(args.checkpoint)
    ds = _load_dataset(cfg)
    _check_n(params.cfg.n, ds)
    missing_rates = [_parse_float(p) for p in args.missing_rates.split(",")]
    zero_rates = [_parse_float(p) for p in args.zero_rates.split(",")]
    blob = {"variant": params.variant, "split": args.split, "missing": {}, "zeros": {}}
    for rate in missing_rates:
        blob["missing"][repr(rate)] = _eval_report(
            params, norm, ds, cfg, args.split, rate, 0.0)
    for rate in zero_rates:
        blob["zeros"][repr(rate)] = _eval_report(
            params, norm, ds, cfg, args.split, 0.0, rate)
    _emit(args.out, json.dumps(blob, indent=2))
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are config errors (exit 1)
        raise ConfigError(message)


def _add_config_args(sp) -> None:
    sp.add_argument("--config", default=None, help="key = value run config file")
    for key in CONFIG_KEYS:
        sp.add_argument(f"--{key}", default=None, metavar="V",
                        help=f"override config key {key}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mnde",
                     description="Multi-view neural differential equations "
                                 "for long-term flow forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_config_args(p)
    p.add_argument("--days", type=int, default=7)
    p.add_argument("--scenario", default="none",
                   help="none | delay | abrupt | delay+abrupt")
    p.add_argument("--tau", type=int, default=4, help="delay per hop, in intervals")
    p.add_argument("--noise", type=float, default=3.0)
    p.add_argument("--out", default=None, help="output CSV (default: config dataset)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_config_args(p)
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--curve", default=None, help="loss-curve CSV (default: <out>.loss.csv)")
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("checkpoint")
    _add_config_args(p)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", default=None, help="JSON output path (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forecast", help="forecast from the last l intervals")
    p.add_argument("checkpoint")
    p.add_argument("input", help="CSV holding exactly l intervals")
    _add_config_args(p)
    p.add_argument("--out", default=None, help="forecast CSV path (default: stdout)")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("gradcheck", help="run the built-in numerical verification suite")
    p.add_argument("--quick", action="store_true",
                   help="subset of end-to-end parameter checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("robustness", help="metrics under missing/zero corruption sweeps")
    p.add_argument("checkpoint")
    _add_config_args(p)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--missing-rates", default="0,0.1,0.3,0.5")
    p.add_argument("--zero-rates", default="0,0.1,0.25")
    p.add_argument("--out", default=None, help="JSON output path (default: stdout)")
    p.set_defaults(func=cmd_robustness)
    return parser


def main(argv=None) -> int:
    try:
        _cap_threads()
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
