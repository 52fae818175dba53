"""
Shared fixtures: tiny architectures, seeded generators and small CGM series.
"""

from dataclasses import replace
from typing import Callable, List, Sequence

import numpy as np
import pytest

from config import ModelConfig, RunConfig
from data import PatientSeries, WindowSample, time_feature_matrix
from numerics import make_rng

START = np.datetime64("2021-01-04T00:00:00", "ns")  # a Monday
FIVE_MINUTES = np.timedelta64(300, "s")


def make_series(values: Sequence[float], patient_id: str = "P001", start: np.datetime64 = START,
                gaps_after: Sequence[int] = ()) -> PatientSeries:
    """Readings at 5-minute cadence; an extra hour is inserted after each index in gaps_after."""
    offsets = np.arange(len(values)) * FIVE_MINUTES
    for index in gaps_after:
        offsets[index + 1:] += np.timedelta64(3600, "s")
    return PatientSeries(patient_id, start + offsets, np.asarray(values, dtype=np.float64))


def make_window(inputs: Sequence[float], targets: Sequence[float], patient_index: int = 0,
                patient_id: str = "P001") -> WindowSample:
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    stamps = START + np.arange(inputs.size + targets.size) * FIVE_MINUTES
    return WindowSample(patient_index=patient_index, patient_id=patient_id, inputs=inputs, targets=targets,
                        time_features=time_feature_matrix(stamps), anchor=stamps[inputs.size - 1])


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(0)


@pytest.fixture
def tiny_config() -> ModelConfig:
    """Full architecture at gradient-check scale (t0 = 8, tau = 3)."""
    return ModelConfig(t0=8, tau=3, enc_hidden=3, dec_hidden=4, embed_dim=2, attn_heads=2, attn_hidden=3,
                       head_hidden=5)


@pytest.fixture
def tiny_run_config(tiny_config) -> RunConfig:
    config = RunConfig()
    # AR-I reads ar_order + ar_diff readings, which must fit in t0 = 8
    return replace(config, model=tiny_config, data=replace(config.data, ar_order=3),
                   train=replace(config.train, max_epochs=3, batch_size=16, early_stop_patience=2))


@pytest.fixture
def random_windows(rng) -> Callable[[int, ModelConfig, int], List[WindowSample]]:
    """Windows of random-walk glucose around 120 mg/dl spread over n_patients."""

    def build(count: int, config: ModelConfig, n_patients: int = 2) -> List[WindowSample]:
        windows = []
        for i in range(count):
            walk = 120.0 + np.cumsum(rng.normal(0.0, 3.0, config.t0 + config.tau))
            windows.append(make_window(walk[:config.t0], walk[config.t0:], patient_index=i % n_patients,
                                       patient_id=f"P{i % n_patients + 1:03d}"))
        return windows

    return build
