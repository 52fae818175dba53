"""
CGM data handling: CSV ingestion, cleaning, temporal splitting, windowing
with time features, normalization and the synthetic population generator.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import SyntheticConfig
from logger_config import get_logger

logger = get_logger(__name__)

CSV_COLUMNS = ["patient_id", "timestamp", "glucose_mgdl"]
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
NS_PER_SECOND = 1_000_000_000


class DataFormatError(ValueError):
    """Raised for malformed CGM input files."""


class InsufficientHistoryError(ValueError):
    """Raised when fewer contiguous points than the encoder length precede an anchor."""

    def __init__(self, message: str, available: int, required: int):
        super().__init__(message)
        self.available = available
        self.required = required


@dataclass(frozen=True)
class CgmRecord:
    patient_id: str
    timestamp: pd.Timestamp
    glucose: float


@dataclass
class PatientSeries:
    """One patient's time-ordered CGM readings"""
    patient_id: str
    timestamps: np.ndarray  # datetime64[ns], UTC
    glucose: np.ndarray  # mg/dl

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[ns]")
        self.glucose = np.asarray(self.glucose, dtype=np.float64)
        if self.timestamps.shape != self.glucose.shape:
            raise ValueError(f"patient {self.patient_id}: {self.timestamps.size} timestamps "
                             f"but {self.glucose.size} glucose values")

    def __len__(self) -> int:
        return int(self.glucose.size)

    def slice(self, start: int, stop: int) -> "PatientSeries":
        return PatientSeries(self.patient_id, self.timestamps[start:stop], self.glucose[start:stop])

    def records(self) -> List[CgmRecord]:
        return [CgmRecord(self.patient_id, pd.Timestamp(t, tz="UTC"), float(g))
                for t, g in zip(self.timestamps, self.glucose)]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "patient_id": self.patient_id,
            "timestamp": pd.DatetimeIndex(self.timestamps).strftime(TIMESTAMP_FORMAT),
            "glucose_mgdl": self.glucose,
        })


# ==================== Time features ====================

@dataclass(frozen=True)
class TimeFeatures:
    hour_frac: float  # hour of day / 24, minutes included
    dow_frac: float  # day of week / 7, Monday = 0
    weekend: float  # 1 on Saturday and Sunday

    def as_array(self) -> np.ndarray:
        return np.array([self.hour_frac, self.dow_frac, self.weekend])


def time_feature_matrix(timestamps: np.ndarray) -> np.ndarray:
    """Vectorised time features, shape (n, 3)."""
    index = pd.DatetimeIndex(np.asarray(timestamps, dtype="datetime64[ns]"))
    hours = index.hour.to_numpy() + index.minute.to_numpy() / 60.0 + index.second.to_numpy() / 3600.0
    dow = index.dayofweek.to_numpy()
    return np.column_stack([hours / 24.0, dow / 7.0, (dow >= 5).astype(np.float64)])


def extract_time_features(timestamp) -> TimeFeatures:
    """
    Time features of one instant (interpreted in UTC).

    Args:
        timestamp: Anything ``pandas.Timestamp`` accepts

    Returns:
        TimeFeatures with hour/day fractions in [0, 1) and the weekend flag
    """
    ts = pd.Timestamp(timestamp)
    if ts.tzinfo is not None:
        ts = ts.tz_convert("UTC").tz_localize(None)
    row = time_feature_matrix(np.array([ts.to_datetime64()]))[0]
    return TimeFeatures(hour_frac=float(row[0]), dow_frac=float(row[1]), weekend=float(row[2]))


# ==================== CSV I/O ====================

def load_csv(path: Union[str, Path]) -> List[PatientSeries]:
    """
    Read a ``patient_id,timestamp,glucose_mgdl`` CSV file.

    Args:
        path: CSV path; timestamps ISO-8601, naive values taken as UTC

    Returns:
        One series per patient, ordered by patient id
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataFormatError(f"{path}: cannot parse CSV: {e}") from e

    if list(frame.columns) != CSV_COLUMNS:
        raise DataFormatError(f"{path}: header must be {','.join(CSV_COLUMNS)}, got {','.join(frame.columns)}")

    # line 1 is the header
    line_numbers = np.arange(len(frame)) + 2

    glucose = pd.to_numeric(frame["glucose_mgdl"], errors="coerce")
    bad = glucose.isna() | ~np.isfinite(glucose.fillna(0.0)) | (glucose <= 0)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataFormatError(f"{path}: line {line_numbers[row]}: invalid glucose value "
                              f"{frame['glucose_mgdl'].iloc[row]!r}")

    timestamps = pd.to_datetime(frame["timestamp"], utc=True, errors="coerce", format="ISO8601")
    if timestamps.isna().any():
        row = int(np.flatnonzero(timestamps.isna().to_numpy())[0])
        raise DataFormatError(f"{path}: line {line_numbers[row]}: invalid timestamp "
                              f"{frame['timestamp'].iloc[row]!r}")

    empty_ids = frame["patient_id"].str.strip() == ""
    if empty_ids.any():
        row = int(np.flatnonzero(empty_ids.to_numpy())[0])
        raise DataFormatError(f"{path}: line {line_numbers[row]}: empty patient_id")

    values = timestamps.dt.tz_localize(None).to_numpy(dtype="datetime64[ns]")
    series_list: List[PatientSeries] = []
    for patient_id, rows in sorted(frame.groupby("patient_id").indices.items()):
        ts = values[rows]
        steps = np.diff(ts.astype(np.int64))
        if np.any(steps <= 0):
            row = rows[int(np.flatnonzero(steps <= 0)[0]) + 1]
            raise DataFormatError(f"{path}: line {line_numbers[row]}: timestamps of patient "
                                  f"{patient_id} are not strictly increasing")
        series_list.append(PatientSeries(str(patient_id), ts, glucose.to_numpy()[rows]))

    logger.info(f"Loaded {len(frame)} records for {len(series_list)} patients from {path}")
    return series_list


def write_csv(series_list: Sequence[PatientSeries], path: Union[str, Path]) -> int:
    """Write series in the ingestion format; returns the record count."""
    frames = [s.to_frame() for s in series_list]
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=CSV_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.1f", lineterminator="\n")
    return len(frame)


# ==================== Cleaning and splitting ====================

def clean(series: PatientSeries, max_jump: float = 40.0) -> PatientSeries:
    """
    Drop readings that jump more than ``max_jump`` mg/dl away from the last
    retained reading. Gaps are left in place, never interpolated.
    """
    if len(series) == 0:
        return series
    keep = np.zeros(len(series), dtype=bool)
    keep[0] = True
    last = series.glucose[0]
    for i in range(1, len(series)):
        value = series.glucose[i]
        if abs(value - last) <= max_jump:
            keep[i] = True
            last = value

    removed = len(series) - int(keep.sum())
    if removed:
        logger.debug(f"Patient {series.patient_id}: removed {removed} implausible readings")
    return PatientSeries(series.patient_id, series.timestamps[keep], series.glucose[keep])


def split_temporal(series: PatientSeries, ratio: Tuple[int, int, int] = (20, 1, 1)
                   ) -> Optional[Tuple[PatientSeries, PatientSeries, PatientSeries]]:
    """
    Contiguous train/validation/test split, training first and test most recent.

    Returns:
        (train, val, test) or None when the series is shorter than sum(ratio)
    """
    total = sum(ratio)
    length = len(series)
    if length < total:
        logger.warning(f"Excluding patient {series.patient_id}: {length} records, need at least {total}")
        return None
    n_train = ratio[0] * length // total
    n_val = ratio[1] * length // total
    return (series.slice(0, n_train),
            series.slice(n_train, n_train + n_val),
            series.slice(n_train + n_val, length))


# ==================== Windows ====================

@dataclass
class WindowSample:
    """
    One forecasting instance. Glucose arrays hold mg/dl values and are views
    into the owning segment; normalized copies are produced per batch.
    """
    patient_index: int  # -1 for a patient without an embedding row
    patient_id: str
    inputs: np.ndarray  # (t0,) mg/dl, last element is x_T
    targets: Optional[np.ndarray]  # (tau,) mg/dl, None when forecasting the unknown future
    time_features: np.ndarray  # (t0 + tau, 3)
    anchor: np.datetime64  # timestamp of x_T

    @property
    def last_value(self) -> float:
        return float(self.inputs[-1])


def windowize(segment: PatientSeries, t0: int, tau: int, patient_index: int = 0,
              cadence_seconds: int = 300, gap_tolerance_seconds: int = 60,
              stride: int = 1) -> List[WindowSample]:
    """
    Sliding windows of t0 + tau contiguous readings.

    Args:
        segment: Cleaned series (or one of its splits)
        t0: Encoder length
        tau: Forecast steps
        patient_index: Embedding row of the patient
        cadence_seconds: Nominal spacing
        gap_tolerance_seconds: Allowed deviation from the nominal spacing
        stride: Step between window starts

    Returns:
        Windows whose every inter-reading spacing is within tolerance
    """
    if t0 < 1 or tau < 1:
        raise ValueError(f"t0 and tau must be >= 1, got t0={t0}, tau={tau}")
    span = t0 + tau
    n = len(segment)
    if n < span:
        return []

    steps = np.diff(segment.timestamps.astype(np.int64)) / NS_PER_SECOND
    broken = np.abs(steps - cadence_seconds) > gap_tolerance_seconds
    broken_before = np.concatenate([[0], np.cumsum(broken)])
    features = time_feature_matrix(segment.timestamps)

    windows = []
    for start in range(0, n - span + 1, stride):
        end = start + span
        # links start..end-2 join the readings of this window
        if broken_before[end - 1] - broken_before[start] > 0:
            continue
        windows.append(WindowSample(
            patient_index=patient_index,
            patient_id=segment.patient_id,
            inputs=segment.glucose[start:start + t0],
            targets=segment.glucose[start + t0:end],
            time_features=features[start:end],
            anchor=segment.timestamps[start + t0 - 1],
        ))
    return windows


def contiguous_runs(segment: PatientSeries, cadence_seconds: int = 300,
                    gap_tolerance_seconds: int = 60) -> List[PatientSeries]:
    """Split a series at every gap into runs of regularly spaced readings."""
    if len(segment) == 0:
        return []
    steps = np.diff(segment.timestamps.astype(np.int64)) / NS_PER_SECOND
    cuts = np.flatnonzero(np.abs(steps - cadence_seconds) > gap_tolerance_seconds) + 1
    bounds = np.concatenate([[0], cuts, [len(segment)]])
    return [segment.slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def forecast_window(series: PatientSeries, anchor, t0: int, tau: int, patient_index: int,
                    cadence_seconds: int = 300, gap_tolerance_seconds: int = 60) -> WindowSample:
    """
    Window for forecasting after ``anchor``: the last t0 contiguous readings at
    or before it, with time features for the tau future steps.
    """
    anchor_ts = pd.Timestamp(anchor)
    if anchor_ts.tzinfo is not None:
        anchor_ts = anchor_ts.tz_convert("UTC").tz_localize(None)
    end = int(np.searchsorted(series.timestamps, anchor_ts.to_datetime64(), side="right"))
    if end == 0:
        raise InsufficientHistoryError(
            f"patient {series.patient_id} has no readings at or before {anchor_ts}: "
            f"{t0} contiguous readings required", available=0, required=t0)
    lag = (anchor_ts.to_datetime64() - series.timestamps[end - 1]) / np.timedelta64(1, "s")
    if lag > cadence_seconds + gap_tolerance_seconds:
        raise InsufficientHistoryError(
            f"patient {series.patient_id}: last reading {pd.Timestamp(series.timestamps[end - 1])} is "
            f"{lag:.0f}s before {anchor_ts}, history must reach the anchor", available=0, required=t0)

    steps =np.diff(series.timestamps[:end].astype(np.int64)) / NS_PER_SECOND
    broken = np.flatnonzero(np.abs(steps - cadence_seconds) > gap_tolerance_seconds)
    run_start = int(broken[-1]) + 1 if broken.size else 0
    available = end - run_start
    if available < t0:
        raise InsufficientHistoryError(
            f"patient {series.patient_id}: only {available} contiguous readings up to {anchor_ts}, "
            f"{t0} required (short by {t0 - available})", available=available, required=t0)

    history = series.timestamps[end - t0:end]
    future = history[-1] + np.arange(1, tau + 1) * np.timedelta64(cadence_seconds, "s")
    return WindowSample(
        patient_index=patient_index,
        patient_id=series.patient_id,
        inputs=series.glucose[end - t0:end],
        targets=None,
        time_features=time_feature_matrix(np.concatenate([history, future])),
        anchor=history[-1],
    )


# ==================== Normalization ====================

@dataclass(frozen=True)
class Normalizer:
    """Global z-score scaling fit on training glucose only"""
    mean: float
    std: float

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


def fit_normalizer(train: Iterable[Union[PatientSeries, WindowSample, np.ndarray]]) -> Normalizer:
    """
    Population mean/std over training glucose values.

    Args:
        train: Training series, windows (inputs and targets) or raw arrays

    Returns:
        Normalizer with the fitted statistics
    """
    chunks = []
    for item in train:
        if isinstance(item, PatientSeries):
            chunks.append(item.glucose)
        elif isinstance(item, WindowSample):
            chunks.append(item.inputs)
            if item.targets is not None:
                chunks.append(item.targets)
        else:
            chunks.append(np.asarray(item, dtype=np.float64).ravel())
    values = np.concatenate(chunks) if chunks else np.empty(0)
    if values.size == 0:
        raise ValueError("cannot fit a normalizer on an empty training set")
    std = float(values.std())
    if std <= 0.0:
        raise ValueError("training glucose has zero variance")
    return Normalizer(mean=float(values.mean()), std=std)


@dataclass
class WindowBatch:
    """Stacked windows in normalized space"""
    inputs: np.ndarray  # (B, t0)
    targets: Optional[np.ndarray]  # (B, tau)
    time_features: np.ndarray  # (B, t0 + tau, 3)
    patient_index: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, index: np.ndarray) -> "WindowBatch":
        index = np.asarray(index, dtype=np.int64)
        return WindowBatch(
            inputs=self.inputs[index],
            targets=None if self.targets is None else self.targets[index],
            time_features=self.time_features[index],
            patient_index=self.patient_index[index],
        )


def make_batch(windows: Sequence[WindowSample], normalizer: Normalizer) -> WindowBatch:
    if not windows:
        raise ValueError("cannot batch an empty window list")
    has_targets = all(w.targets is not None for w in windows)
    return WindowBatch(
        inputs=normalizer.apply(np.stack([w.inputs for w in windows])),
        targets=normalizer.apply(np.stack([w.targets for w in windows])) if has_targets else None,
        time_features=np.stack([w.time_features for w in windows]),
        patient_index=np.array([w.patient_index for w in windows], dtype=np.int64),
    )


# ==================== Synthetic population ====================

@dataclass
class PatientProfile:
    """Per-patient generator parameters"""
    baseline: float
    circadian_amplitude: float
    circadian_phase: float  # hours
    meal_hours: Tuple[float, ...]
    meal_amplitudes: Tuple[float, ...]
    meal_peak_minutes: float
    weekend_shift: float  # hours added to every meal on weekends
    smoothness: float  # AR(1) coefficient of the noise


def draw_profile(rng: np.random.Generator, cfg: SyntheticConfig) -> PatientProfile:
    n_meals = int(rng.integers(cfg.meals_per_day_range[0], cfg.meals_per_day_range[1] + 1))
    return PatientProfile(
        baseline=float(rng.uniform(*cfg.baseline_range)),
        circadian_amplitude=float(rng.uniform(*cfg.circadian_amplitude_range)),
        circadian_phase=float(rng.uniform(*cfg.circadian_phase_range)),
        meal_hours=tuple(sorted(float(h) for h in rng.uniform(*cfg.meal_hours_range, size=n_meals))),
        meal_amplitudes=tuple(float(a) for a in rng.uniform(*cfg.meal_amplitude_range, size=n_meals)),
        meal_peak_minutes=float(rng.uniform(*cfg.meal_peak_minutes_range)),
        weekend_shift=float(rng.uniform(*cfg.weekend_shift_hours_range)),
        smoothness=float(rng.uniform(*cfg.smoothness_range)),
    )


def _meal_response(minutes_after: np.ndarray, amplitude: float, peak: float) -> np.ndarray:
    # rises to `amplitude` at `peak` minutes, then decays
    x = minutes_after / peak
    return amplitude * x * np.exp(1.0 - x)


def simulate_patient(profile: PatientProfile, patient_id: str, n_days: int, rng: np.random.Generator,
                     cfg: SyntheticConfig, outlier_rate: float = 0.0) -> PatientSeries:
    """
    One synthetic CGM trace at 5-minute cadence.

    The noiseless part depends only on time of day and weekday/weekend, so with
    no noise and no outliers day d and day d + 7 are identical.
    """
    per_day = 288
    n = n_days * per_day
    start = pd.Timestamp(cfg.start)
    if start.tzinfo is not None:
        start = start.tz_convert("UTC").tz_localize(None)
    timestamps = start.to_datetime64() + np.arange(n) * np.timedelta64(300, "s")
    minutes = np.arange(n) * 5.0
    start_minute = start.hour * 60.0 + start.minute
    hours = ((minutes + start_minute) / 60.0) % 24.0

    values = profile.baseline + profile.circadian_amplitude * np.sin(
        2.0 * np.pi * (hours - profile.circadian_phase) / 24.0)

    # meals from the day before the first one contribute their tails
    first_dow = int(pd.Timestamp(timestamps[0]).dayofweek)
    reach = int(np.ceil(8.0 * profile.meal_peak_minutes / 5.0))
    for day in range(-1, n_days):
        weekend = (first_dow + day) % 7 >= 5
        shift = profile.weekend_shift if weekend else 0.0
        for hour, amplitude in zip(profile.meal_hours, profile.meal_amplitudes):
            meal_minute = day * 1440.0 + (hour + shift) * 60.0 - start_minute
            first = int(np.ceil(meal_minute / 5.0))
            lo = max(0, first)
            hi = min(n, first + reach)
            if hi <= lo:
                continue
            values[lo:hi] += _meal_response(minutes[lo:hi] - meal_minute, amplitude, profile.meal_peak_minutes)

    if cfg.noise_std > 0:
        phi = profile.smoothness
        shocks = rng.standard_normal(n) * cfg.noise_std
        noise = np.empty(n)
        noise[0] = shocks[0]
        scale = np.sqrt(1.0 - phi * phi)
        for t in range(1, n):
            noise[t] = phi * noise[t - 1] + scale * shocks[t]
        values = values + noise

    if outlier_rate > 0:
        hit = rng.random(n) < outlier_rate
        magnitude = rng.uniform(*cfg.outlier_magnitude_range, size=n)
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        values = values + np.where(hit, sign * magnitude, 0.0)

    values = np.round(np.clip(values, *cfg.clamp_range), 1)
    return PatientSeries(patient_id, timestamps, values)


def generate_synthetic(n_patients: int, n_days: int, rng: np.random.Generator, outlier_rate: float = 0.0,
                       cfg: Optional[SyntheticConfig] = None) -> List[PatientSeries]:
    """
    Synthetic CGM population.

    Args:
        n_patients: Number of patients (ids P001, P002, ...)
        n_days: Days per patient, 288 readings each
        rng: Seeded generator; the whole population is reproducible from it
        outlier_rate: Fraction of readings carrying a spike
        cfg: Generator parameters

    Returns:
        One series per patient
    """
    if n_patients < 1 or n_days < 1:
        raise ValueError(f"need n_patients >= 1 and n_days >= 1, got {n_patients}, {n_days}")
    cfg = cfg or SyntheticConfig()
    profiles = [draw_profile(rng, cfg) for _ in range(n_patients)]
    population = [simulate_patient(profile, f"P{i + 1:03d}", n_days, rng, cfg, outlier_rate)
                  for i, profile in enumerate(profiles)]
    logger.info(f"Generated {n_patients} synthetic patients x {n_days} days "
                f"({n_patients * n_days * 288} readings, outlier rate {outlier_rate})")
    return population


def group_by_patient(series_list: Sequence[PatientSeries]) -> Dict[str, PatientSeries]:
    return {s.patient_id: s for s in series_list}
