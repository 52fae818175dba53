from dataclasses import replace

import numpy as np
import pytest

from baselines import InsufficientDataError
from config import RunConfig, SyntheticConfig
from conftest import make_series
from data import Normalizer, fit_normalizer, generate_synthetic
from metrics import Stratum
from numerics import make_rng
from pipeline import (AR_I, LINEAR_SEQ, OURS_MSE, OURS_ROBUST, PERSISTENCE, WITHOUT_ATTENTION, WITHOUT_EMBEDDING,
                      ar_predictor, evaluate, persistence_predictor, prepare_dataset, run_comparison,
                      train_forecaster)
from training import EmptySplitError


@pytest.fixture
def run_config(tiny_run_config):
    return replace(tiny_run_config, data=replace(tiny_run_config.data, train_stride=25, horizons=(1, 2, 3)))


@pytest.fixture
def population():
    # gentle noiseless traces never trip the cleaning rule, so window counts are exact
    cfg = SyntheticConfig(noise_std=0.0, meal_amplitude_range=(10.0, 20.0))
    return generate_synthetic(2, 3, make_rng(0), cfg=cfg)


class TestPrepareDataset:
    def test_window_counts(self, population, run_config):
        prepared = prepare_dataset(population, run_config)
        # 864 readings split 785 / 39 / 40, windows span t0 + tau = 11 readings
        assert len(prepared.train) == 2 * 31
        assert len(prepared.val) == 2 * 29
        assert len(prepared.test) == 2 * 30
        assert prepared.patient_ids == ["P001", "P002"]
        assert {w.patient_index for w in prepared.test} == {0, 1}

    def test_normalizer_comes_from_training_splits(self, population, run_config):
        prepared = prepare_dataset(population, run_config)
        assert prepared.normalizer == fit_normalizer(prepared.train_series.values())
        assert all(len(s) == 785 for s in prepared.train_series.values())
        config = prepared.model_config(run_config.model)
        assert (config.norm_mean, config.norm_std) == (prepared.normalizer.mean, prepared.normalizer.std)

    def test_existing_model_statistics_are_reused(self, population, run_config):
        normalizer = Normalizer(111.0, 22.0)
        prepared = prepare_dataset(population, run_config, patient_ids=["P002"], normalizer=normalizer)
        assert prepared.normalizer is normalizer
        indices = {w.patient_id: w.patient_index for w in prepared.test}
        assert indices == {"P001": -1, "P002": 0}

    def test_short_patients_are_excluded(self, population, run_config):
        short = make_series(np.full(21, 120.0), patient_id="P009")
        prepared = prepare_dataset(population + [short], run_config)
        assert prepared.excluded == ["P009"]
        assert "P009" not in prepared.patient_ids

    def test_nothing_to_split(self, run_config):
        with pytest.raises(EmptySplitError):
            prepare_dataset([make_series(np.full(10, 120.0))], run_config)


class TestEvaluate:
    def test_persistence(self, population, run_config):
        prepared = prepare_dataset(population, run_config)
        report = evaluate(persistence_predictor(3), prepared.test, (1, 2, 3), PERSISTENCE)
        assert report.method == PERSISTENCE
        assert report.count(3, Stratum.FULL) == len(prepared.test)
        assert report.cell(1, Stratum.FULL, "ape_median") >= 0.0

    def test_oracle_scores_zero(self, population, run_config):
        prepared = prepare_dataset(population, run_config)
        report = evaluate(lambda windows: np.stack([w.targets for w in windows]), prepared.test, (1, 3), "oracle")
        assert report.cell(3, Stratum.FULL, "rmse") == 0.0

    def test_ar_predictor(self, population, run_config):
        prepared = prepare_dataset(population, run_config)
        forecasts = ar_predictor(prepared, run_config)(prepared.test[:4])
        assert forecasts.shape == (4, 3)
        assert np.all(np.isfinite(forecasts))

    def test_no_windows(self):
        with pytest.raises(EmptySplitError):
            evaluate(persistence_predictor(3), [], (1,), PERSISTENCE)


def test_train_forecaster_carries_statistics(population, run_config):
    prepared = prepare_dataset(population, run_config)
    model, report = train_forecaster(prepared, replace(run_config, cold_start=True), make_rng(0))
    assert model.config.norm_mean == prepared.normalizer.mean
    assert model.cold_start
    assert report.epochs_run >= 1


class TestComparison:
    def test_every_method_reports(self, population, run_config):
        result = run_comparison(prepare_dataset(population, run_config), run_config, ablations=True)
        assert result.failures == {}
        assert list(result.reports) == [OURS_ROBUST, OURS_MSE, LINEAR_SEQ, AR_I, PERSISTENCE,
                                        WITHOUT_ATTENTION, WITHOUT_EMBEDDING]
        assert set(result.train_reports) == {OURS_ROBUST, OURS_MSE, LINEAR_SEQ, WITHOUT_ATTENTION,
                                             WITHOUT_EMBEDDING}
        counts = {name: report.count(3, Stratum.FULL) for name, report in result.reports.items()}
        assert len(set(counts.values())) == 1

    def test_deterministic(self, population, run_config):
        prepared = prepare_dataset(population, run_config)
        first = run_comparison(prepared, run_config)
        second = run_comparison(prepared, run_config)
        for name in first.reports:
            assert first.reports[name].frame.equals(second.reports[name].frame), name

    def test_failing_method_is_recorded(self, population, run_config, monkeypatch):
        def broken_fit(*args):
            raise InsufficientDataError("no usable runs")

        monkeypatch.setattr("pipeline.fit_ar", broken_fit)
        result = run_comparison(prepare_dataset(population, run_config), run_config)
        assert result.failures[AR_I] == "no usable runs"
        assert AR_I not in result.reports
        assert PERSISTENCE in result.reports and OURS_ROBUST in result.reports

    def test_provenance_is_attached(self, population, run_config):
        result = run_comparison(prepare_dataset(population, run_config), run_config)
        assert result.reports[PERSISTENCE].provenance["seed"] == run_config.seed
        assert result.reports[PERSISTENCE].provenance["t0"] == run_config.model.t0


@pytest.mark.slow
class TestExperiments:
    """Desk-scale training runs; each takes minutes."""

    @pytest.fixture
    def desk_config(self):
        config = RunConfig(seed=3)
        model = replace(config.model, t0=48, enc_hidden=24, dec_hidden=16, attn_hidden=16, head_hidden=24)
        train = replace(config.train, max_epochs=60, early_stop_patience=10, batch_size=64)
        data = replace(config.data, train_stride=3, horizons=(6, 12))
        return replace(config, model=model, train=train, data=data)

    def test_overfits_noiseless_patients(self, desk_config):
        population = generate_synthetic(2, 10, make_rng(1), cfg=SyntheticConfig(noise_std=0.0))
        config = replace(desk_config, train=replace(desk_config.train, max_epochs=200, early_stop_patience=200,
                                                    learning_rate=3e-3))
        prepared = prepare_dataset(population, config)
        model, report = train_forecaster(prepared, config, make_rng(config.seed))
        assert report.train_loss[-1] < 0.1 * report.train_loss[0]
        errors = model.predict(prepared.train[:64]) - np.stack([w.targets for w in prepared.train[:64]])
        assert np.max(np.abs(errors)) < 2.0

    def test_trimming_resists_outliers(self, desk_config):
        population = generate_synthetic(8, 30, make_rng(desk_config.seed), outlier_rate=0.05)
        result = run_comparison(prepare_dataset(population, desk_config), desk_config)
        robust = result.reports[OURS_ROBUST].cell(6, Stratum.FULL, "ape_median")
        mse = result.reports[OURS_MSE].cell(6, Stratum.FULL, "ape_median")
        assert robust <= mse

    def test_full_model_beats_ablations(self, desk_config):
        population = generate_synthetic(8, 30, make_rng(desk_config.seed))
        result = run_comparison(prepare_dataset(population, desk_config), desk_config, ablations=True)
        for horizon in (6, 12):
            full = result.reports[OURS_ROBUST].cell(horizon, Stratum.FULL, "ape_median")
            for variant in (WITHOUT_ATTENTION, WITHOUT_EMBEDDING):
                assert full <= result.reports[variant].cell(horizon, Stratum.FULL, "ape_median"), (variant, horizon)
