"""
Main entry point for the glucose forecasting system.

Sub-commands: generate, analyze-acf, train, evaluate, compare, forecast.
Exit codes: 0 success, 1 runtime/data failure, 2 usage/config error.
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

APP_DIR = Path(__file__).resolve().parent
if str(APP_DIR) not in sys.path:
    sys.path.insert(0, str(APP_DIR))

import numpy as np
import pandas as pd

from baselines import InsufficientDataError
from config import (ConfigError, DataConfig, ModelConfig, RunConfig, SyntheticConfig, TrainConfig,
                    apply_overrides, load_run_config)
from data import (DataFormatError, InsufficientHistoryError, clean, forecast_window, generate_synthetic,
                  group_by_patient, load_csv, write_csv)
from layers import UnknownPatientError
from logger_config import get_logger, set_verbose
from metrics import ConstantSeriesError, autocorrelation, comparison_frame, render_table, write_report_csv
from model import GlucoseForecaster, ModelFileError
from numerics import make_rng
from pipeline import evaluate, prepare_dataset, run_comparison, train_forecaster
from training import EmptySplitError, NonFiniteGradientError

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

_MODEL = ModelConfig()
_TRAIN = TrainConfig()
_DATA = DataConfig()
_SYNTH = SyntheticConfig()


class UsageError(Exception):
    """Invalid combination of arguments detected after parsing."""


def _horizons(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"horizons must be comma-separated integers, got {text!r}")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"horizons must be positive, got {text!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    """
    Build the command line parser.

    Flags default to None so that values from --config survive unless a flag
    is given; the help text states the built-in default of every setting.
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str,
                        help="Flat JSON run configuration (see docs/config-schema.md)")
    common.add_argument("--seed", type=int,
                        help="Seed of the single PCG64 generator all randomness flows from (default 0)")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--t0", type=int,
                             help=f"Encoder length in readings (default {_MODEL.t0}, about 16 hours)")
    model_flags.add_argument("--tau", type=int,
                             help=f"Forecast steps (default {_MODEL.tau}, one hour at 5-minute cadence)")

    train_flags = argparse.ArgumentParser(add_help=False)
    train_flags.add_argument("--beta", type=float,
                             help=f"Fraction of per-sample losses kept per batch (default {_TRAIN.beta}, "
                                  f"1.0 gives plain MSE)")
    train_flags.add_argument("--epochs", type=int,
                             help=f"Maximum training epochs (default {_TRAIN.max_epochs})")
    train_flags.add_argument("--batch-size", type=int,
                             help=f"Mini-batch size (default {_TRAIN.batch_size})")
    train_flags.add_argument("--train-stride", type=int,
                             help=f"Stride between training windows (default {_DATA.train_stride})")

    parser = argparse.ArgumentParser(
        description="Personalized blood glucose forecasting from CGM data",
        epilog=f"Built-in defaults: clip threshold {_TRAIN.clip_init} decaying by {_TRAIN.clip_decay} per epoch "
               f"with RAdam at lr {_TRAIN.learning_rate}. Data split {_DATA.split_ratio} "
               f"train:val:test; readings jumping more than {_DATA.max_jump_mgdl} mg/dl are dropped."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="Write a synthetic CGM population")
    gen.add_argument("--patients", type=int, help=f"Number of patients (default {_SYNTH.n_patients})")
    gen.add_argument("--days", type=int, help=f"Days per patient, 288 readings each (default {_SYNTH.n_days})")
    gen.add_argument("--outlier-rate", type=float,
                     help=f"Fraction of readings carrying a spike (default {_SYNTH.outlier_rate})")
    gen.add_argument("--out", type=str, required=True, help="Output CSV path")

    acf = sub.add_parser("analyze-acf", parents=[common], help="Per-patient autocorrelation with bands")
    acf.add_argument("--input", type=str, required=True, help="CGM CSV path")
    acf.add_argument("--max-lag", type=int, default=288, help="Largest lag in readings (default 288, one day)")
    acf.add_argument("--out", type=str, help="Output CSV path (stdout when omitted)")

    train = sub.add_parser("train", parents=[common, model_flags, train_flags], help="Train the forecaster")
    train.add_argument("--data", type=str, help="CGM CSV path")
    train.add_argument("--model-out", type=str, help=f"Model file path (default {RunConfig.model_path})")
    train.add_argument("--report-out", type=str, help="Training history CSV path (default <model>_history.csv)")
    train.add_argument("--no-attention", action="store_true", help="Drop the attention context ('W/O Att')")
    train.add_argument("--no-embedding", action="store_true", help="Drop the patient embedding ('W/O Embed')")
    train.add_argument("--no-time-features", action="store_true", help="Drop the time-of-day/week inputs")

    ev = sub.add_parser("evaluate", parents=[common], help="Score a model on the test split")
    ev.add_argument("--model", type=str, help=f"Model file path (default {RunConfig.model_path})")
    ev.add_argument("--data", type=str, help="CGM CSV path")
    ev.add_argument("--horizons", type=_horizons,
                    help=f"Comma-separated horizons in steps (default "
                         f"{','.join(map(str, _DATA.horizons))}: 15/30/45/60 minutes)")
    ev.add_argument("--out", type=str, help="Report CSV path")
    ev.add_argument("--cold-start", action="store_true",
                    help="Use the mean embedding for patients unknown to the model")

    cmp_ = sub.add_parser("compare", parents=[common, model_flags, train_flags],
                          help="Train and score every method on identical splits")
    cmp_.add_argument("--data", type=str, help="CGM CSV path")
    cmp_.add_argument("--out", type=str, help="Combined table CSV path")
    cmp_.add_argument("--ablations", action="store_true", help="Also train the 'W/O Att' and 'W/O Embed' variants")

    fc = sub.add_parser("forecast", parents=[common], help="Forecast one patient after a timestamp")
    fc.add_argument("--model", type=str, help=f"Model file path (default {RunConfig.model_path})")
    fc.add_argument("--data", type=str, help="CGM CSV path")
    fc.add_argument("--patient", type=str, required=True, help="Patient id")
    fc.add_argument("--at", type=str, required=True, help="Anchor timestamp (ISO-8601, UTC)")
    fc.add_argument("--out", type=str, help="Forecast CSV path (stdout when omitted)")
    fc.add_argument("--attention-out", type=str, help="Attention map CSV path (stdout when omitted)")
    fc.add_argument("--cold-start", action="store_true",
                    help="Use the mean embedding for patients unknown to the model")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file values first, then explicit flags."""
    config = load_run_config(args.config)
    flags: Dict[str, Any] = {
        "seed": getattr(args, "seed", None),
        "n_patients": getattr(args, "patients", None),
        "n_days": getattr(args, "days", None),
        "outlier_rate": getattr(args, "outlier_rate", None),
        "data_path": getattr(args, "data", None),
        "t0": getattr(args, "t0", None),
        "tau": getattr(args, "tau", None),
        "beta": getattr(args, "beta", None),
        "max_epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "train_stride": getattr(args, "train_stride", None),
        "horizons": getattr(args, "horizons", None),
    }
    if getattr(args, "model_out", None) or getattr(args, "model", None):
        flags["model_path"] = getattr(args, "model_out", None) or getattr(args, "model", None)
    if getattr(args, "cold_start", False):
        flags["cold_start"] = True
    if getattr(args, "no_attention", False):
        flags["use_attention"] = False
    if getattr(args, "no_embedding", False):
        flags["use_embedding"] = False
    if getattr(args, "no_time_features", False):
        flags["use_time_features"] = False
    config = apply_overrides(config, flags)
    logger.debug(f"Effective configuration: {json.dumps(config.to_flat_dict(), sort_keys=True)}")
    return config


def history_path(model_path: str) -> str:
    """Training history CSV that sits beside the model file."""
    model = Path(model_path)
    return str(model.with_name(f"{model.stem}_history.csv"))


def _check_writable(path: Optional[str]) -> None:
    if not path:
        return
    parent = Path(path).resolve().parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise UsageError(f"cannot write to {path}: directory {parent} does not exist or is not writable")
    if Path(path).is_dir():
        raise UsageError(f"cannot write to {path}: it is a directory")


def _require_data(config: RunConfig) -> str:
    if not config.data_path:
        raise UsageError("no input data: pass --data or set data_path in the config file")
    return config.data_path


def _emit(frame: pd.DataFrame, path: Optional[str]) -> None:
    if path:
        frame.to_csv(path, index=False, lineterminator="\n")
    else:
        sys.stdout.write(frame.to_csv(index=False, lineterminator="\n"))


# ==================== Commands ====================

def cmd_generate(args: argparse.Namespace, config: RunConfig) -> int:
    _check_writable(args.out)
    syn = config.synthetic
    population = generate_synthetic(syn.n_patients, syn.n_days, make_rng(config.seed), syn.outlier_rate, syn)
    count = write_csv(population, args.out)
    print(f"Wrote {count} records for {syn.n_patients} patients to {args.out}")
    return EXIT_OK


def cmd_analyze_acf(args: argparse.Namespace, config: RunConfig) -> int:
    _check_writable(args.out)
    if args.max_lag < 0:
        raise UsageError(f"--max-lag must be >= 0, got {args.max_lag}")
    frames = []
    for series in load_csv(args.input):
        cleaned = clean(series, config.data.max_jump_mgdl)
        try:
            result = autocorrelation(cleaned.glucose, args.max_lag)
        except (ConstantSeriesError, ValueError) as e:
            logger.warning(f"Skipping patient {series.patient_id}: {e}")
            continue
        frame = result.to_frame()
        frame.insert(0, "patient_id", series.patient_id)
        frames.append(frame)
        significant = np.flatnonzero(result.significant()[1:]) + 1
        negative = [int(k) for k in significant if result.values[k] < 0]
        logger.info(f"Patient {series.patient_id}: {len(significant)} lags outside the 99% band, "
                    f"first significant negative lag {negative[0] if negative else 'none'}")
    if not frames:
        logger.error("No patient series could be analyzed")
        return EXIT_FAILURE
    _emit(pd.concat(frames, ignore_index=True), args.out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    try:
        Path(config.model_path).parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create the model directory: {e}") from e
    _check_writable(config.model_path)
    report_path = args.report_out or history_path(config.model_path)
    _check_writable(report_path)

    prepared = prepare_dataset(load_csv(_require_data(config)), config)
    model, report = train_forecaster(prepared, config, make_rng(config.seed))
    model.save(config.model_path)

    print(f"Parameters: {model.num_parameters()}")
    print(f"Epochs run: {report.epochs_run}, best epoch {report.best_epoch}, "
          f"best validation loss {report.best_val_loss:.6f}")
    write_report_csv(report.to_frame(), report_path, config.to_flat_dict())
    logger.info(f"Wrote training history to {report_path}")
    return EXIT_OK


def _load_model(config: RunConfig) -> GlucoseForecaster:
    model = GlucoseForecaster.load(config.model_path)
    model.cold_start = config.cold_start
    return model


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> int:
    _check_writable(args.out)
    model = _load_model(config)
    horizons = list(config.data.horizons)
    if max(horizons) > model.config.tau:
        raise UsageError(f"horizon {max(horizons)} exceeds the model's forecast length tau={model.config.tau}")

    # windows follow the stored architecture
    config = apply_overrides(config, {"t0": model.config.t0, "tau": model.config.tau})
    prepared = prepare_dataset(load_csv(_require_data(config)), config, model.patient_ids, model.normalizer)
    report = evaluate(model.predict, prepared.test, horizons, "Ours", config.to_flat_dict())

    print(report.to_text())
    if args.out:
        report.to_csv(args.out)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, config: RunConfig) -> int:
    _check_writable(args.out)
    prepared = prepare_dataset(load_csv(_require_data(config)), config)
    result = run_comparison(prepared, config, ablations=args.ablations)

    print(render_table(result.reports, config.data.horizons, result.failures))
    if args.out:
        write_report_csv(comparison_frame(result.reports, result.failures), args.out, config.to_flat_dict())
    if not result.reports:
        logger.error("Every method failed")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_forecast(args: argparse.Namespace, config: RunConfig) -> int:
    _check_writable(args.out)
    _check_writable(args.attention_out)
    model = _load_model(config)
    patients = group_by_patient(load_csv(_require_data(config)))
    if args.patient not in patients:
        raise DataFormatError(f"patient {args.patient} has no readings in {config.data_path}")

    series = clean(patients[args.patient], config.data.max_jump_mgdl)
    window = forecast_window(series, args.at, model.config.t0, model.config.tau,
                             model.resolve_patient(args.patient), config.data.cadence_seconds,
                             config.data.gap_tolerance_seconds)
    forecast = model.forecast(window, config.data.cadence_seconds)

    predictions = pd.DataFrame({
        "timestamp": [t.strftime("%Y-%m-%dT%H:%M:%SZ") for t in forecast.timestamps],
        "glucose_mgdl": np.round(forecast.values, 2),
    })
    _emit(predictions, args.out)

    if forecast.attention is not None:
        tau, heads, t0 = forecast.attention.shape
        step, head, position = np.meshgrid(np.arange(1, tau + 1), np.arange(heads), np.arange(t0), indexing="ij")
        attention = pd.DataFrame({
            "step": step.ravel(),
            "head": head.ravel(),
            "lag": (t0 - 1 - position).ravel(),  # 0 is the last observed reading
            "weight": forecast.attention.ravel(),
        })
        if not args.attention_out:
            sys.stdout.write("\n")
        _emit(attention, args.attention_out)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "analyze-acf": cmd_analyze_acf,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "forecast": cmd_forecast,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    set_verbose(args.verbose)
    try:
        config = resolve_config(args)
        logger.info(f"=== glucose forecasting: {args.command} ===")
        return COMMANDS[args.command](args, config)

    except (ConfigError, UsageError) as e:
        logger.error(f"Usage error: {e}")
        return EXIT_USAGE
    except (DataFormatError, InsufficientHistoryError, InsufficientDataError, UnknownPatientError,
            ModelFileError, EmptySplitError, NonFiniteGradientError, FileNotFoundError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"System error: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
