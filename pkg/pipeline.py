"""
Shared data preparation and evaluation driver.

Every method (the forecaster, its ablations and the baselines) consumes the
identical window stream: clean -> temporal split -> windowize -> normalize,
computed once here.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from baselines import ArModel, fit_ar, fit_linear_seq, forecast_ar, persistence_forecast
from config import ModelConfig, RunConfig
from data import (Normalizer, PatientSeries, WindowSample, clean, contiguous_runs, fit_normalizer,
                  split_temporal, windowize)
from logger_config import get_logger
from metrics import MetricsReport, build_report
from model import GlucoseForecaster
from numerics import make_rng, spawn_rngs
from training import EmptySplitError, TrainReport, fit

logger = get_logger(__name__)

OURS_ROBUST = "Ours-Robust"
OURS_MSE = "Ours-MSE"
LINEAR_SEQ = "LinearSeq"
AR_I = "AR-I"
PERSISTENCE = "Persistence"
WITHOUT_ATTENTION = "W/O Att"
WITHOUT_EMBEDDING = "W/O Embed"


@dataclass
class PreparedData:
    """Windows of every split plus what is needed to reproduce them"""
    patient_ids: List[str]  # embedding rows
    normalizer: Normalizer
    train: List[WindowSample]
    val: List[WindowSample]
    test: List[WindowSample]
    train_series: Dict[str, PatientSeries] = field(default_factory=dict)  # cleaned training splits
    excluded: List[str] = field(default_factory=list)

    def model_config(self, config: ModelConfig) -> ModelConfig:
        """The architecture with this dataset's normalization statistics filled in."""
        return replace(config, norm_mean=self.normalizer.mean, norm_std=self.normalizer.std)


def prepare_dataset(series_list: Sequence[PatientSeries], run_config: RunConfig,
                    patient_ids: Optional[Sequence[str]] = None,
                    normalizer: Optional[Normalizer] = None) -> PreparedData:
    """
    Clean, split and windowize every patient.

    Args:
        series_list: Raw series, one per patient
        run_config: Effective configuration (t0, tau, cleaning, split, stride)
        patient_ids: Embedding rows of an existing model; patients outside it get index -1
        normalizer: Statistics of an existing model; fit on the training splits when None

    Returns:
        PreparedData
    """
    cfg = run_config.data
    t0, tau = run_config.model.t0, run_config.model.tau
    known = list(patient_ids) if patient_ids is not None else None

    splits: List[Tuple[PatientSeries, Tuple[PatientSeries, PatientSeries, PatientSeries]]] = []
    excluded = []
    for series in series_list:
        cleaned = clean(series, cfg.max_jump_mgdl)
        parts = split_temporal(cleaned, cfg.split_ratio)
        if parts is None:
            excluded.append(series.patient_id)
            continue
        splits.append((cleaned, parts))
    if not splits:
        raise EmptySplitError("no patient has enough records to split")

    ids = known if known is not None else [s.patient_id for s, _ in splits]
    index = {pid: i for i, pid in enumerate(ids)}

    gaps = dict(cadence_seconds=cfg.cadence_seconds, gap_tolerance_seconds=cfg.gap_tolerance_seconds)
    train, val, test = [], [], []
    train_series = {}
    for cleaned, (tr, va, te) in splits:
        v = index.get(cleaned.patient_id, -1)
        if v < 0:
            logger.warning(f"Patient {cleaned.patient_id} has no embedding row")
        train.extend(windowize(tr, t0, tau, v, stride=cfg.train_stride, **gaps))
        val.extend(windowize(va, t0, tau, v, **gaps))
        test.extend(windowize(te, t0, tau, v, **gaps))
        train_series[cleaned.patient_id] = tr

    if normalizer is None:
        normalizer = fit_normalizer(train_series.values())
    logger.info(f"Prepared {len(splits)} patients ({len(excluded)} excluded): "
                f"{len(train)} train, {len(val)} val, {len(test)} test windows")
    return PreparedData(patient_ids=ids, normalizer=normalizer, train=train, val=val, test=test,
                        train_series=train_series, excluded=excluded)


# ==================== Evaluation driver ====================

Predictor = Callable[[List[WindowSample]], np.ndarray]


def evaluate(predict: Predictor, windows: Sequence[WindowSample], horizons: Sequence[int], method: str,
             provenance: Optional[dict] = None) -> MetricsReport:
    """Score any forecaster on a window list (forecasts and truths in mg/dl)."""
    if not windows:
        raise EmptySplitError(f"{method}: no test windows to evaluate")
    windows = list(windows)
    forecasts = np.asarray(predict(windows), dtype=np.float64)
    truths = np.stack([w.targets for w in windows])
    last_values = np.array([w.last_value for w in windows])
    return build_report(truths, forecasts[:, :truths.shape[1]], last_values, horizons, method, provenance)


def ar_predictor(prepared: PreparedData, run_config: RunConfig) -> Predictor:
    """Per-patient AR-I models fit on the contiguous runs of each training split."""
    cfg = run_config.data
    tau = run_config.model.tau
    models: Dict[str, ArModel] = {}
    for pid, series in prepared.train_series.items():
        runs = contiguous_runs(series, cfg.cadence_seconds, cfg.gap_tolerance_seconds)
        models[pid] = fit_ar([r.glucose for r in runs], cfg.ar_order, cfg.ar_diff)

    def predict(windows: List[WindowSample]) -> np.ndarray:
        return np.stack([forecast_ar(models[w.patient_id], w.inputs, tau) for w in windows])

    return predict


def persistence_predictor(tau: int) -> Predictor:
    def predict(windows: List[WindowSample]) -> np.ndarray:
        return np.stack([persistence_forecast(w.inputs, tau) for w in windows])

    return predict


def train_forecaster(prepared: PreparedData, run_config: RunConfig, rng: np.random.Generator,
                     model_config: Optional[ModelConfig] = None,
                     beta: Optional[float] = None) -> Tuple[GlucoseForecaster, TrainReport]:
    config = prepared.model_config(model_config or run_config.model)
    train_config = run_config.train if beta is None else replace(run_config.train, beta=beta)
    model, report = fit(prepared.train, prepared.val, config, train_config, rng, prepared.patient_ids)
    model.cold_start = run_config.cold_start
    logger.info(f"Trained forecaster with {model.num_parameters()} parameters")
    return model, report


@dataclass
class ComparisonResult:
    reports: Dict[str, MetricsReport]
    failures: Dict[str, str]
    train_reports: Dict[str, TrainReport]


def run_comparison(prepared: PreparedData, run_config: RunConfig, ablations: bool = False) -> ComparisonResult:
    """
    Train or fit every method on the same splits and score them on the same
    test windows. A failing method is recorded and the others still run.
    """
    horizons = run_config.data.horizons
    provenance = run_config.to_flat_dict()
    model_cfg = run_config.model

    # forecaster variants share the run seed
    def forecaster(config=None, beta=None):
        def run():
            model, report = train_forecaster(prepared, run_config, make_rng(run_config.seed), config, beta)
            return model.predict, report
        return run

    def linear_seq():
        model, report = fit_linear_seq(prepared.train, prepared.val, prepared.model_config(model_cfg),
                                       run_config.train, spawn_rngs(run_config.seed, 1)[0])
        return model.predict, report

    methods: List[Tuple[str, Callable]] = [
        (OURS_ROBUST, forecaster()),
        (OURS_MSE, forecaster(beta=1.0)),
        (LINEAR_SEQ, linear_seq),
        (AR_I, lambda: (ar_predictor(prepared, run_config), None)),
        (PERSISTENCE, lambda: (persistence_predictor(model_cfg.tau), None)),
    ]
    if ablations:
        methods += [
            (WITHOUT_ATTENTION, forecaster(replace(model_cfg, use_attention=False))),
            (WITHOUT_EMBEDDING, forecaster(replace(model_cfg, use_embedding=False))),
        ]

    result = ComparisonResult(reports={}, failures={}, train_reports={})
    for name, build in methods:
        logger.info(f"Running {name}")
        try:
            predict, train_report = build()
            result.reports[name] = evaluate(predict, prepared.test, horizons, name, provenance)
            if train_report is not None:
                result.train_reports[name] = train_report
        except Exception as e:
            logger.error(f"{name} failed: {e}")
            result.failures[name] = str(e) or type(e).__name__
    return result
