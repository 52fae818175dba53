"""
Evaluation protocol: windowed APE and RMSE per horizon, Full/Event/Hypo/Hyper
stratification by the value at forecasting time, quartiles, and the
autocorrelation analysis with its confidence bands.
"""

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from logger_config import get_logger

logger = get_logger(__name__)

HYPO_THRESHOLD = 70.0  # mg/dl, strictly below
HYPER_THRESHOLD = 180.0  # mg/dl, strictly above
QUANTILE_METHOD = "linear"  # interpolation between order statistics
REPORT_COLUMNS = ["horizon", "stratum", "metric", "value", "count"]
METRICS = ("ape_median", "ape_q1", "ape_q3", "rmse", "rmse_q1", "rmse_q3")
CADENCE_MINUTES = 5


class Stratum(Enum):
    FULL = "Full"
    EVENT = "Event"
    HYPO = "Hypo"
    HYPER = "Hyper"


class ConstantSeriesError(ValueError):
    """Raised when autocorrelation is requested for a zero-variance series."""


def stratify(last_value: float) -> FrozenSet[Stratum]:
    """Strata of a sample given its last observed value x_T (mg/dl)."""
    strata = {Stratum.FULL}
    if last_value < HYPO_THRESHOLD:
        strata.update((Stratum.EVENT, Stratum.HYPO))
    elif last_value > HYPER_THRESHOLD:
        strata.update((Stratum.EVENT, Stratum.HYPER))
    return frozenset(strata)


def ape_sample(true: np.ndarray, pred: np.ndarray) -> float:
    """
    Mean absolute percentage error over the points of one forecast window.

    Raises:
        ValueError: Length mismatch or a non-positive true value
    """
    true = np.asarray(true, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if true.shape != pred.shape or true.size == 0:
        raise ValueError(f"APE needs equal non-empty lengths, got {true.shape} and {pred.shape}")
    if np.any(true <= 0):
        raise ValueError("APE is undefined for non-positive true values")
    return float(np.mean(np.abs(true - pred) / true))


def rmse_pool(squared_errors: Union[np.ndarray, Sequence[np.ndarray]]) -> Optional[float]:
    """Root of the mean squared error over all samples and steps; None when empty."""
    values = np.concatenate([np.ravel(s) for s in squared_errors]) if len(squared_errors) else np.empty(0)
    if values.size == 0:
        return None
    return float(np.sqrt(np.mean(values)))


# ==================== Autocorrelation ====================

@dataclass
class Autocorrelation:
    lags: np.ndarray
    values: np.ndarray
    band95: float
    band99: float
    n: int

    def significant(self, level: float = 0.99) -> np.ndarray:
        band = self.band99 if level >= 0.99 else self.band95
        return np.abs(self.values) > band

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"lag": self.lags, "value": self.values,
                             "band95": self.band95, "band99": self.band99})


def autocorrelation(values: np.ndarray, max_lag: int) -> Autocorrelation:
    """
    R(k) = (1 / (n - k)) sum_t (x_t - mean)(x_{t+k} - mean) / var for k = 0..max_lag,
    with the population variance, so R(0) = 1. Bands are +-1.96/sqrt(n) and
    +-2.576/sqrt(n).
    """
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if max_lag < 0:
        raise ValueError(f"max_lag must be >= 0, got {max_lag}")
    if n <= max_lag + 1:
        raise ValueError(f"series of {n} points is too short for max_lag={max_lag}")
    centered = x - x.mean()
    variance = float(np.dot(centered, centered)) / n
    if variance <= 0.0:
        raise ConstantSeriesError("autocorrelation of a constant series")

    r = np.empty(max_lag + 1)
    for k in range(max_lag + 1):
        r[k] = float(np.dot(centered[:n - k], centered[k:])) / (n - k) / variance
    return Autocorrelation(lags=np.arange(max_lag + 1), values=r,
                           band95=1.96 / np.sqrt(n), band99=2.576 / np.sqrt(n), n=n)


# ==================== Reports ====================

@dataclass
class MetricsReport:
    """(horizon, stratum, metric) cells for one method; absent cells hold NaN with count 0"""
    method: str
    frame: pd.DataFrame
    horizons: List[int]
    provenance: Dict[str, Any] = field(default_factory=dict)

    def cell(self, horizon: int, stratum: Stratum, metric: str) -> Optional[float]:
        rows = self.frame[(self.frame["horizon"] == horizon) & (self.frame["stratum"] == stratum.value)
                          & (self.frame["metric"] == metric)]
        if rows.empty:
            raise KeyError(f"no cell for horizon {horizon}, {stratum.value}, {metric}")
        value = rows["value"].iloc[0]
        return None if pd.isna(value) else float(value)

    def count(self, horizon: int, stratum: Stratum) -> int:
        rows = self.frame[(self.frame["horizon"] == horizon) & (self.frame["stratum"] == stratum.value)]
        return int(rows["count"].iloc[0]) if not rows.empty else 0

    def to_csv(self, path: Union[str, Path]) -> None:
        write_report_csv(self.frame, path, self.provenance)

    def to_text(self) -> str:
        return render_table({self.method: self}, self.horizons)


def _quartiles(values: np.ndarray):
    q1, median, q3 = np.quantile(values, [0.25, 0.5, 0.75], method=QUANTILE_METHOD)
    return float(q1), float(median), float(q3)


def build_report(truths: np.ndarray, forecasts: np.ndarray, last_values: np.ndarray,
                 horizons: Sequence[int] = (3, 6, 9, 12), method: str = "",
                 provenance: Optional[Mapping[str, Any]] = None) -> MetricsReport:
    """
    Fill every (horizon, stratum) cell.

    Args:
        truths: (n, tau) observed mg/dl
        forecasts: (n, tau) predicted mg/dl
        last_values: (n,) x_T of each sample, used for stratification
        horizons: Steps; horizon h scores the first h points of each forecast
        method: Label carried into renderings
        provenance: Effective configuration echoed into the CSV output

    Returns:
        MetricsReport
    """
    truths = np.asarray(truths, dtype=np.float64)
    forecasts = np.asarray(forecasts, dtype=np.float64)
    last_values = np.asarray(last_values, dtype=np.float64)
    if truths.ndim != 2 or truths.shape[0] == 0:
        raise ValueError("cannot build a report from an empty test set")
    if forecasts.shape != truths.shape or last_values.shape != (truths.shape[0],):
        raise ValueError(f"shape mismatch: truths {truths.shape}, forecasts {forecasts.shape}, "
                         f"last values {last_values.shape}")
    if max(horizons) > truths.shape[1]:
        raise ValueError(f"horizon {max(horizons)} exceeds the forecast length {truths.shape[1]}")

    valid = np.all(truths > 0, axis=1)
    if not np.all(valid):
        logger.warning(f"{method or 'report'}: excluding {int((~valid).sum())} samples with non-positive truth")
    truths, forecasts, last_values = truths[valid], forecasts[valid], last_values[valid]

    membership = {s: np.array([s in stratify(v) for v in last_values], dtype=bool) for s in Stratum}
    rows = []
    for h in horizons:
        errors = forecasts[:, :h] - truths[:, :h]
        ape = np.mean(np.abs(errors) / truths[:, :h], axis=1)
        sq = errors ** 2
        sample_rmse = np.sqrt(np.mean(sq, axis=1))
        for stratum in Stratum:
            mask = membership[stratum]
            count = int(mask.sum())
            if count == 0:
                rows.extend({"horizon": h, "stratum": stratum.value, "metric": m, "value": np.nan, "count": 0}
                            for m in METRICS)
                continue
            ape_q1, ape_med, ape_q3 = _quartiles(ape[mask])
            rmse_q1, _, rmse_q3 = _quartiles(sample_rmse[mask])
            values = {"ape_median": ape_med, "ape_q1": ape_q1, "ape_q3": ape_q3,
                      "rmse": rmse_pool(sq[mask]), "rmse_q1": rmse_q1, "rmse_q3": rmse_q3}
            rows.extend({"horizon": h, "stratum": stratum.value, "metric": m, "value": values[m], "count": count}
                        for m in METRICS)

    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    return MetricsReport(method=method, frame=frame, horizons=list(horizons), provenance=dict(provenance or {}))


# ==================== Rendering ====================

def write_report_csv(frame: pd.DataFrame, path: Union[str, Path], provenance: Optional[Mapping[str, Any]] = None
                     ) -> None:
    """CSV with an optional leading '# config {...}' provenance line."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        if provenance:
            f.write(f"# config {json.dumps(dict(provenance), sort_keys=True)}\n")
        frame.to_csv(f, index=False, float_format="%.6f", lineterminator="\n")


def read_report_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def comparison_frame(reports: Mapping[str, MetricsReport], failures: Optional[Mapping[str, str]] = None
                     ) -> pd.DataFrame:
    """
    Long table over methods: report rows plus one ``status`` column; failed
    methods contribute a single row with status ``failed: <reason>``.
    """
    frames = []
    for method, report in reports.items():
        frame = report.frame.copy()
        frame.insert(0, "method", method)
        frame["status"] = "ok"
        frames.append(frame)
    for method, reason in (failures or {}).items():
        frames.append(pd.DataFrame([{"method": method, "horizon": np.nan, "stratum": "", "metric": "",
                                     "value": np.nan, "count": 0, "status": f"failed: {reason}"}]))
    if not frames:
        return pd.DataFrame(columns=["method"] + REPORT_COLUMNS + ["status"])
    return pd.concat(frames, ignore_index=True)


def _format(value: Optional[float], percent: bool) -> str:
    if value is None:
        return "-"
    return f"{100.0 * value:.2f}%" if percent else f"{value:.2f}"


def render_table(reports: Mapping[str, MetricsReport], horizons: Sequence[int],
                 failures: Optional[Mapping[str, str]] = None) -> str:
    """
    Aligned text: one block per horizon, one row per method, median APE and
    RMSE for each stratum.
    """
    strata = list(Stratum)
    name_width = max([len("Method")] + [len(m) for m in reports] + [len(m) for m in (failures or {})])
    lines = []
    for h in horizons:
        lines.append(f"Horizon {h} steps ({h * CADENCE_MINUTES} min)")
        header = f"{'Method':<{name_width}}"
        for stratum in strata:
            header += f" | {stratum.value + ' APE':>11} {stratum.value + ' RMSE':>11} {'n':>6}"
        lines.append(header)
        lines.append("-" * len(header))
        for method, report in reports.items():
            row = f"{method:<{name_width}}"
            for stratum in strata:
                row += (f" | {_format(report.cell(h, stratum, 'ape_median'), True):>11}"
                        f" {_format(report.cell(h, stratum, 'rmse'), False):>11}"
                        f" {report.count(h, stratum):>6}")
            lines.append(row)
        for method, reason in (failures or {}).items():
            lines.append(f"{method:<{name_width}} | FAILED: {reason}")
        lines.append("")
    return "\n".join(lines)
