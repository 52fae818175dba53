from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from config import SyntheticConfig
from conftest import FIVE_MINUTES, START, make_series, make_window
from data import (DataFormatError, InsufficientHistoryError, Normalizer, PatientProfile, PatientSeries, clean,
                  contiguous_runs, extract_time_features, fit_normalizer, forecast_window, generate_synthetic,
                  group_by_patient, load_csv, make_batch, simulate_patient, split_temporal, time_feature_matrix,
                  windowize, write_csv)
from metrics import autocorrelation
from numerics import make_rng


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


class TestLoadCsv:
    HEADER = "patient_id,timestamp,glucose_mgdl"

    def test_groups_by_patient(self, tmp_path):
        path = write_lines(tmp_path / "cgm.csv", [
            self.HEADER,
            "P2,2021-01-04T00:00:00Z,110",
            "P1,2021-01-04T00:00:00Z,100.5",
            "P1,2021-01-04T00:05:00Z,102",
        ])
        series = load_csv(path)
        assert [s.patient_id for s in series] == ["P1", "P2"]
        assert [len(s) for s in series] == [2, 1]
        np.testing.assert_array_equal(series[0].glucose, [100.5, 102.0])
        assert series[0].timestamps[1] - series[0].timestamps[0] == FIVE_MINUTES

    def test_offsets_are_converted_to_utc(self, tmp_path):
        path = write_lines(tmp_path / "cgm.csv", [self.HEADER, "P1,2021-01-04T01:00:00+01:00,100"])
        assert load_csv(path)[0].timestamps[0] == START

    def test_bad_glucose_names_the_line(self, tmp_path):
        path = write_lines(tmp_path / "cgm.csv", [
            self.HEADER,
            "P1,2021-01-04T00:00:00Z,100",
            "P1,2021-01-04T00:05:00Z,101",
            "P1,2021-01-04T00:10:00Z,abc",
        ])
        with pytest.raises(DataFormatError, match="line 4"):
            load_csv(path)

    @pytest.mark.parametrize("value", ["0", "-5", "nan", "inf", ""])
    def test_non_positive_or_missing_glucose(self, tmp_path, value):
        path = write_lines(tmp_path / "cgm.csv", [self.HEADER, f"P1,2021-01-04T00:00:00Z,{value}"])
        with pytest.raises(DataFormatError, match="line 2"):
            load_csv(path)

    def test_bad_timestamp(self, tmp_path):
        path = write_lines(tmp_path / "cgm.csv", [self.HEADER, "P1,yesterday,100"])
        with pytest.raises(DataFormatError, match="line 2"):
            load_csv(path)

    def test_timestamps_must_increase(self, tmp_path):
        path = write_lines(tmp_path / "cgm.csv", [
            self.HEADER,
            "P1,2021-01-04T00:05:00Z,100",
            "P1,2021-01-04T00:05:00Z,101",
        ])
        with pytest.raises(DataFormatError, match="not strictly increasing"):
            load_csv(path)

    def test_wrong_header(self, tmp_path):
        path = write_lines(tmp_path / "cgm.csv", ["id,time,value", "P1,2021-01-04T00:00:00Z,100"])
        with pytest.raises(DataFormatError, match="header"):
            load_csv(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_csv(tmp_path / "absent.csv")

    def test_round_trip_preserves_every_record(self, tmp_path):
        population = generate_synthetic(2, 2, make_rng(4), outlier_rate=0.02)
        count = write_csv(population, tmp_path / "cgm.csv")
        assert count == 2 * 2 * 288
        loaded = load_csv(tmp_path / "cgm.csv")
        assert sum(len(s) for s in loaded) == count
        for original, read in zip(population, loaded):
            assert read.patient_id == original.patient_id
            np.testing.assert_array_equal(read.timestamps, original.timestamps)
            np.testing.assert_array_equal(read.glucose, original.glucose)


class TestClean:
    def test_compares_against_last_kept_reading(self):
        np.testing.assert_array_equal(clean(make_series([100, 150, 148])).glucose, [100.0])

    def test_moderate_steps_survive(self):
        np.testing.assert_array_equal(clean(make_series([100, 130, 160])).glucose, [100.0, 130.0, 160.0])

    def test_singleton_and_empty(self):
        assert len(clean(make_series([100]))) == 1
        assert len(clean(make_series([]))) == 0

    def test_spike_is_removed_with_its_timestamp(self):
        series = make_series([100, 102, 190, 104, 106])
        cleaned = clean(series)
        np.testing.assert_array_equal(cleaned.glucose, [100, 102, 104, 106])
        np.testing.assert_array_equal(cleaned.timestamps, series.timestamps[[0, 1, 3, 4]])

    def test_idempotent(self, rng):
        series = make_series(120 + np.cumsum(rng.normal(0, 25, 500)))
        once = clean(series)
        twice = clean(once)
        np.testing.assert_array_equal(twice.glucose, once.glucose)
        np.testing.assert_array_equal(twice.timestamps, once.timestamps)


class TestSplit:
    @pytest.mark.parametrize("length,expected", [(220, (200, 10, 10)), (22, (20, 1, 1)), (230, (209, 10, 11))])
    def test_sizes(self, length, expected):
        splits = split_temporal(make_series(np.arange(length) + 100.0))
        assert tuple(len(s) for s in splits) == expected

    def test_partitions_in_order(self):
        series = make_series(np.arange(300) + 100.0)
        train, val, test = split_temporal(series)
        np.testing.assert_array_equal(np.concatenate([train.glucose, val.glucose, test.glucose]), series.glucose)
        assert train.timestamps[-1] < val.timestamps[0] < test.timestamps[0]

    def test_too_short_is_excluded(self):
        assert split_temporal(make_series(np.arange(21) + 100.0)) is None


class TestWindowize:
    @pytest.mark.parametrize("length,expected", [(203, 2), (201, 0), (202, 1)])
    def test_count(self, length, expected):
        assert len(windowize(make_series(np.full(length, 110.0)), t0=190, tau=12)) == expected

    def test_window_contents(self):
        series = make_series(np.arange(20) + 100.0, patient_id="P007")
        windows = windowize(series, t0=5, tau=2, patient_index=3)
        first = windows[0]
        np.testing.assert_array_equal(first.inputs, [100, 101, 102, 103, 104])
        np.testing.assert_array_equal(first.targets, [105, 106])
        assert first.anchor == series.timestamps[4]
        assert first.last_value == 104.0
        assert (first.patient_index, first.patient_id) == (3, "P007")
        np.testing.assert_array_equal(first.time_features, time_feature_matrix(series.timestamps[:7]))

    def test_gap_splits_the_windows(self):
        series = make_series(np.arange(300) + 100.0, gaps_after=[149])
        windows = windowize(series, t0=10, tau=3)
        span = 13
        # brute force: a window is valid when it does not straddle readings 149 and 150
        expected = [s for s in range(300 - span + 1) if s + span - 1 <= 149 or s >= 150]
        assert [int(w.inputs[0] - 100) for w in windows] == expected
        assert len(windows) == 276

    def test_jitter_within_tolerance_is_contiguous(self):
        series = make_series(np.arange(30) + 100.0)
        series.timestamps[10:] += np.timedelta64(45, "s")
        assert len(windowize(series, t0=5, tau=2)) == 24
        series.timestamps[20:] += np.timedelta64(90, "s")
        assert len(windowize(series, t0=5, tau=2)) < 24

    def test_stride(self):
        series = make_series(np.arange(50) + 100.0)
        starts = [int(w.inputs[0] - 100) for w in windowize(series, t0=5, tau=2, stride=4)]
        assert starts == list(range(0, 44, 4))

    def test_invalid_lengths(self):
        with pytest.raises(ValueError):
            windowize(make_series([100.0] * 10), t0=0, tau=2)


def test_contiguous_runs():
    series = make_series(np.arange(12) + 100.0, gaps_after=[4, 8])
    runs = contiguous_runs(series)
    assert [len(r) for r in runs] == [5, 4, 3]
    np.testing.assert_array_equal(runs[1].glucose, [105, 106, 107, 108])
    assert contiguous_runs(make_series([])) == []


class TestForecastWindow:
    def test_exact_history(self):
        series = make_series(np.arange(190) + 100.0)
        window = forecast_window(series, series.timestamps[-1], t0=190, tau=12, patient_index=0)
        np.testing.assert_array_equal(window.inputs, series.glucose)
        assert window.targets is None
        future = series.timestamps[-1] + np.arange(1, 13) * FIVE_MINUTES
        np.testing.assert_array_equal(window.time_features[190:], time_feature_matrix(future))

    def test_one_reading_short(self):
        series = make_series(np.arange(189) + 100.0)
        with pytest.raises(InsufficientHistoryError) as info:
            forecast_window(series, series.timestamps[-1], t0=190, tau=12, patient_index=0)
        assert (info.value.available, info.value.required) == (189, 190)
        assert "short by 1" in str(info.value)

    def test_history_ends_at_the_anchor(self):
        series = make_series(np.arange(300) + 100.0)
        anchor = pd.Timestamp(series.timestamps[199]) + pd.Timedelta(minutes=2)
        window = forecast_window(series, anchor, t0=190, tau=12, patient_index=1)
        np.testing.assert_array_equal(window.inputs, series.glucose[10:200])
        assert window.anchor == series.timestamps[199]

    def test_gap_limits_history(self):
        series = make_series(np.arange(300) + 100.0, gaps_after=[149])
        with pytest.raises(InsufficientHistoryError) as info:
            forecast_window(series, series.timestamps[-1], t0=190, tau=12, patient_index=0)
        assert info.value.available == 150

    def test_anchor_before_the_data(self):
        series = make_series(np.arange(200) + 100.0)
        with pytest.raises(InsufficientHistoryError):
            forecast_window(series, "2020-12-31T00:00:00Z", t0=190, tau=12, patient_index=0)

    def test_stale_history_is_rejected(self):
        series = make_series(np.arange(200) + 100.0)
        anchor = pd.Timestamp(series.timestamps[-1]) + pd.Timedelta(days=3)
        with pytest.raises(InsufficientHistoryError) as info:
            forecast_window(series, anchor, t0=190, tau=12, patient_index=0)
        assert info.value.available == 0

    def test_anchor_one_step_after_the_last_reading(self):
        series = make_series(np.arange(200) + 100.0)
        anchor = pd.Timestamp(series.timestamps[-1]) + pd.Timedelta(seconds=360)
        window = forecast_window(series, anchor, t0=190, tau=12, patient_index=0)
        assert window.anchor == series.timestamps[-1]
        with pytest.raises(InsufficientHistoryError):
            forecast_window(series, anchor + pd.Timedelta(seconds=1), t0=190, tau=12, patient_index=0)


class TestTimeFeatures:
    def test_saturday_afternoon(self):
        features = extract_time_features("2021-01-09T14:05:00Z")
        assert features.hour_frac == pytest.approx((14 + 5 / 60) / 24)
        assert features.hour_frac == pytest.approx(0.5868, abs=1e-4)
        assert features.dow_frac == pytest.approx(5 / 7)
        assert features.weekend == 1.0

    def test_monday_midnight(self):
        np.testing.assert_array_equal(extract_time_features(START).as_array(), [0.0, 0.0, 0.0])

    def test_sunday_late(self):
        features = extract_time_features("2021-01-10T23:55:00")
        assert features.weekend == 1.0
        assert features.hour_frac == pytest.approx((23 + 55 / 60) / 24)
        assert features.dow_frac == pytest.approx(6 / 7)

    def test_offset_is_read_as_utc(self):
        assert extract_time_features("2021-01-09T15:05:00+01:00") == extract_time_features("2021-01-09T14:05:00Z")

    def test_ranges(self, rng):
        stamps = START + rng.integers(0, 10 ** 6, 500) * np.timedelta64(60, "s")
        features = time_feature_matrix(stamps)
        assert np.all((features[:, :2] >= 0) & (features[:, :2] < 1))
        assert set(np.unique(features[:, 2])) <= {0.0, 1.0}


class TestNormalizer:
    def test_population_statistics(self):
        normalizer = fit_normalizer([np.array([80.0, 120.0])])
        assert (normalizer.mean, normalizer.std) == (100.0, 20.0)
        np.testing.assert_array_equal(normalizer.apply([80.0, 120.0]), [-1.0, 1.0])

    def test_round_trip(self, rng):
        normalizer = Normalizer(mean=135.2, std=41.7)
        values = rng.uniform(40, 400, 1000)
        np.testing.assert_allclose(normalizer.invert(normalizer.apply(values)), values, rtol=0, atol=1e-12)

    def test_fit_on_windows_uses_inputs_and_targets(self):
        normalizer = fit_normalizer([make_window([80.0, 80.0], [120.0, 120.0])])
        assert (normalizer.mean, normalizer.std) == (100.0, 20.0)

    def test_zero_variance(self):
        with pytest.raises(ValueError):
            fit_normalizer([make_series([100.0, 100.0])])

    def test_empty(self):
        with pytest.raises(ValueError):
            fit_normalizer([])


class TestBatch:
    def test_normalizes(self):
        windows = [make_window([80.0, 120.0], [100.0]), make_window([120.0, 120.0], [80.0], patient_index=1)]
        batch = make_batch(windows, Normalizer(100.0, 20.0))
        np.testing.assert_array_equal(batch.inputs, [[-1.0, 1.0], [1.0, 1.0]])
        np.testing.assert_array_equal(batch.targets, [[0.0], [-1.0]])
        np.testing.assert_array_equal(batch.patient_index, [0, 1])
        assert batch.time_features.shape == (2, 3, 3)
        # windows keep their mg/dl values
        np.testing.assert_array_equal(windows[0].inputs, [80.0, 120.0])

    def test_subset(self):
        windows = [make_window([float(i), float(i + 1)], [float(i + 2)], patient_index=i) for i in range(4)]
        sub = make_batch(windows, Normalizer(0.0, 1.0)).subset(np.array([3, 1]))
        np.testing.assert_array_equal(sub.patient_index, [3, 1])
        np.testing.assert_array_equal(sub.targets[:, 0], [5.0, 3.0])

    def test_without_targets(self):
        window = replace(make_window([100.0, 110.0], [120.0]), targets=None)
        assert make_batch([window], Normalizer(0.0, 1.0)).targets is None

    def test_empty(self):
        with pytest.raises(ValueError):
            make_batch([], Normalizer(0.0, 1.0))


class TestSynthetic:
    def test_shape_and_cadence(self):
        population = generate_synthetic(2, 1, make_rng(1))
        assert [s.patient_id for s in population] == ["P001", "P002"]
        for series in population:
            assert len(series) == 288
            assert series.timestamps[0] == START
            assert np.all(np.diff(series.timestamps) == FIVE_MINUTES)
            assert np.all((series.glucose >= 40) & (series.glucose <= 400))

    def test_reproducible(self):
        first = generate_synthetic(3, 2, make_rng(42), outlier_rate=0.05)
        second = generate_synthetic(3, 2, make_rng(42), outlier_rate=0.05)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.glucose, b.glucose)
        third = generate_synthetic(3, 2, make_rng(43), outlier_rate=0.05)
        assert not np.array_equal(first[0].glucose, third[0].glucose)

    def test_noiseless_weeks_repeat(self):
        cfg = SyntheticConfig(noise_std=0.0)
        series = generate_synthetic(1, 15, make_rng(9), cfg=cfg)[0]
        week = 7 * 288
        np.testing.assert_array_equal(series.glucose[:week], series.glucose[week:2 * week])

    def test_late_meal_tail_crosses_midnight(self):
        profile = PatientProfile(baseline=100.0, circadian_amplitude=0.0, circadian_phase=0.0, meal_hours=(23.0,),
                                 meal_amplitudes=(50.0,), meal_peak_minutes=60.0, weekend_shift=0.0,
                                 smoothness=0.5)
        series = simulate_patient(profile, "P001", 2, make_rng(0), SyntheticConfig(noise_std=0.0))
        # the previous evening's meal peaks at midnight
        assert series.glucose[0] == 150.0
        np.testing.assert_array_equal(series.glucose[:288], series.glucose[288:])

    def test_outliers_perturb_readings(self):
        clean_cfg = SyntheticConfig(noise_std=0.0)
        plain = generate_synthetic(1, 3, make_rng(2), cfg=clean_cfg)[0]
        spiky = generate_synthetic(1, 3, make_rng(2), outlier_rate=0.1, cfg=clean_cfg)[0]
        moved = np.abs(spiky.glucose - plain.glucose)
        assert 0.05 < np.mean(moved > 0) < 0.15
        assert moved.max() <= 35.0 + 0.1

    def test_smoother_patients_correlate_more(self):
        cfg = SyntheticConfig(noise_std=8.0)
        base = PatientProfile(baseline=130.0, circadian_amplitude=0.0, circadian_phase=0.0, meal_hours=(),
                              meal_amplitudes=(), meal_peak_minutes=60.0, weekend_shift=0.0, smoothness=0.3)
        rough = simulate_patient(base, "P001", 20, make_rng(3), cfg)
        smooth = simulate_patient(replace(base, smoothness=0.95), "P002", 20, make_rng(3), cfg)
        rough_lag1 = autocorrelation(rough.glucose, 1).values[1]
        smooth_lag1 = autocorrelation(smooth.glucose, 1).values[1]
        assert smooth_lag1 > rough_lag1 + 0.3

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            generate_synthetic(0, 1, make_rng(0))


def test_series_lengths_must_agree():
    with pytest.raises(ValueError):
        PatientSeries("P1", np.array([START]), np.array([100.0, 101.0]))


def test_group_by_patient():
    grouped = group_by_patient([make_series([100.0], "A"), make_series([110.0], "B")])
    assert sorted(grouped) == ["A", "B"]
