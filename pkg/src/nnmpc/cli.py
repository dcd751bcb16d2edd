"""Command-line entry point: ``nnmpc {gen-data,train,validate,control,pipeline}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .config import ConfigError, ExperimentConfig
from .experiment import (
    GNUPLOT_SCRIPT,
    StageError,
    generate_dataset,
    run_control,
    run_pipeline,
    train_model,
    write_atomic,
)
from .narx import ModelError, NarxModel
from .training import DataError, Dataset, one_step_predictions_csv, validate

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3


class MissingFile(Exception):
    def __init__(self, path):
        super().__init__(f"file not found: {path}")
        self.path = str(path)


def _fail(code: int, message: str, **extra) -> int:
    record = {"error": message, "code": code, **extra}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def _read(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise MissingFile(p)
    return p.read_text()


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        cfg = ExperimentConfig()
    else:
        cfg = config_mod.loads(_read(args.config))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_path(args) -> Path:
    return Path(args.model) if args.model else Path(args.out_dir) / "model.json"


def _data_path(args) -> Path:
    return Path(args.data) if args.data else Path(args.out_dir) / "dataset.csv"


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    data = generate_dataset(cfg)
    write_atomic(_out_dir(args) / "dataset.csv", data.to_csv(cfg.hash()))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = Dataset.from_csv(_read(_data_path(args)))
    model, curve = train_model(cfg, data)
    out = _out_dir(args)
    write_atomic(out / "loss.csv", curve.to_csv(cfg.hash()))
    write_atomic(_model_path(args), model.dumps())
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load_config(args)
    model = NarxModel.loads(_read(_model_path(args)))
    data = Dataset.from_csv(_read(_data_path(args)))
    report = validate(model, data)
    out = _out_dir(args)
    write_atomic(out / "validation.csv", report.to_csv(cfg.hash()))
    write_atomic(out / "predictions.csv", one_step_predictions_csv(model, data, cfg.hash()))
    print(
        json.dumps(
            {
                "rmse_train": report.rmse_train,
                "rmse_test": report.rmse_test,
                "autocorr_inside_fraction": report.autocorr_inside_fraction,
                "degenerate": report.degenerate,
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


def cmd_control(args) -> int:
    cfg = _load_config(args)
    model_path = _model_path(args)
    model = NarxModel.loads(_read(model_path))
    log, baseline = run_control(cfg, model, keep_trace=args.solver_trace)
    out = _out_dir(args)
    for lg in (log, baseline):
        lg.metadata = {"config_hash": cfg.hash(), "model": model_path.name}
    write_atomic(out / "trajectory.csv", log.to_csv())
    write_atomic(out / "trajectory_frozen.csv", baseline.to_csv())
    if args.solver_trace:
        write_atomic(out / "solver_trace.csv", log.solver_trace_csv())
    if args.gnuplot_script:
        write_atomic(out / "plot.gp", GNUPLOT_SCRIPT.format(hash=cfg.hash()))
    if log.error:
        return _fail(EXIT_FAILURE, log.error, stage="control")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    if args.dump_defaults:
        sys.stdout.write(ExperimentConfig().to_toml())
        return EXIT_OK
    cfg = _load_config(args)
    run_pipeline(cfg, args.out_dir, gnuplot_script=args.gnuplot_script, solver_trace=args.solver_trace)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nnmpc",
        description="Neural-network predictive control of a simulated CSTR.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=False, data=False):
        p.add_argument("--config", help="experiment config (TOML); built-in defaults if omitted")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--out-dir", default=".", help="directory for output files (default: .)")
        if model:
            p.add_argument("--model", help="model file (default: <out-dir>/model.json)")
        if data:
            p.add_argument("--data", help="dataset CSV (default: <out-dir>/dataset.csv)")

    def plot_flags(p):
        p.add_argument("--gnuplot-script", action="store_true", help="also write plot.gp for the trajectories")
        p.add_argument("--solver-trace", action="store_true", help="also write per-iteration solver_trace.csv")

    p = sub.add_parser("gen-data", help="simulate the plant under excitation and write dataset.csv")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit a NARX model by Levenberg-Marquardt")
    common(p, model=True, data=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("validate", help="one-step errors and residual correlation tests")
    common(p, model=True, data=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("control", help="closed-loop run with a trained model")
    common(p, model=True)
    plot_flags(p)
    p.set_defaults(func=cmd_control)

    p = sub.add_parser("pipeline", help="gen-data, train, validate and control in one run")
    common(p)
    plot_flags(p)
    p.add_argument("--dump-defaults", action="store_true", help="print the default config as TOML and exit")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc), key=exc.key)
    except MissingFile as exc:
        return _fail(EXIT_MISSING, str(exc), path=exc.path)
    except StageError as exc:
        if isinstance(exc.cause, ConfigError):
            return _fail(EXIT_CONFIG, str(exc.cause), key=exc.cause.key)
        return _fail(EXIT_FAILURE, str(exc), stage=exc.stage)
    except (ModelError, DataError, ValueError, RuntimeError) as exc:
        return _fail(EXIT_FAILURE, str(exc), stage=args.command)


if __name__ == "__main__":
    sys.exit(main())
