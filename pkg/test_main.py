import json

import pandas as pd
import pytest

from config import ConfigError, RunConfig, apply_overrides
from data import load_csv
from main import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, build_parser, main, resolve_config
from metrics import read_report_csv

TINY = {
    "version": 1,
    "t0": 8,
    "tau": 3,
    "enc_hidden": 3,
    "dec_hidden": 4,
    "embed_dim": 2,
    "attn_heads": 2,
    "attn_hidden": 3,
    "head_hidden": 5,
    "max_epochs": 2,
    "batch_size": 32,
    "early_stop_patience": 2,
    "train_stride": 7,
    "horizons": [1, 3],
    "ar_order": 3,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generated data, a tiny config and a trained model shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.json"
    config.write_text(json.dumps(TINY))
    data = root / "cgm.csv"
    assert main(["generate", "--patients", "2", "--days", "2", "--seed", "5", "--out", str(data)]) == EXIT_OK
    model = root / "models" / "tiny.jsonl"
    history = root / "history.csv"
    code = main(["train", "--config", str(config), "--data", str(data), "--model-out", str(model),
                 "--report-out", str(history), "--seed", "1"])
    assert code == EXIT_OK
    return {"root": root, "config": str(config), "data": str(data), "model": str(model), "history": history}


class TestGenerate:
    def test_writes_the_population(self, tmp_path):
        out = tmp_path / "cgm.csv"
        assert main(["generate", "--patients", "2", "--days", "1", "--out", str(out)]) == EXIT_OK
        series = load_csv(out)
        assert [s.patient_id for s in series] == ["P001", "P002"]
        assert sum(len(s) for s in series) == 576

    def test_same_seed_same_bytes(self, tmp_path):
        first, second = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (first, second):
            assert main(["generate", "--patients", "1", "--days", "1", "--seed", "9", "--out", str(out)]) == EXIT_OK
        assert first.read_bytes() == second.read_bytes()

    def test_invalid_patient_count(self, tmp_path):
        assert main(["generate", "--patients", "0", "--out", str(tmp_path / "x.csv")]) == EXIT_USAGE

    def test_unwritable_output(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path / "missing" / "x.csv")]) == EXIT_USAGE


class TestArguments:
    def test_help(self, capsys):
        with pytest.raises(SystemExit) as exit_info:
            main(["--help"])
        assert exit_info.value.code == 0
        assert "forecast" in capsys.readouterr().out

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exit_info:
            main(["bogus"])
        assert exit_info.value.code == 2

    def test_flags_override_the_config_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps(TINY))
        args = build_parser().parse_args(["train", "--config", str(path), "--beta", "0.5", "--no-attention"])
        config = resolve_config(args)
        assert config.train.beta == 0.5
        assert config.model.t0 == 8
        assert not config.model.use_attention
        assert config.data.horizons == (1, 3)

    def test_config_version_mismatch(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"version": 2}))
        assert main(["train", "--config", str(path), "--data", "x.csv"]) == EXIT_USAGE

    def test_ar_history_must_fit_the_encoder(self, tmp_path):
        with pytest.raises(ConfigError, match="exceeds t0 = 8"):
            apply_overrides(RunConfig(), {"t0": 8, "ar_order": 9, "ar_diff": 0})
        assert apply_overrides(RunConfig(), {"t0": 8, "ar_order": 7}).model.t0 == 8
        path = tmp_path / "run.json"
        path.write_text(json.dumps({**TINY, "ar_order": 8}))
        assert main(["train", "--config", str(path), "--data", "x.csv"]) == EXIT_USAGE

    def test_train_without_data(self, tmp_path):
        assert main(["train", "--model-out", str(tmp_path / "m.jsonl")]) == EXIT_USAGE

    def test_missing_input(self, tmp_path):
        assert main(["analyze-acf", "--input", str(tmp_path / "none.csv")]) == EXIT_FAILURE


def test_analyze_acf(workspace, tmp_path):
    out = tmp_path / "acf.csv"
    assert main(["analyze-acf", "--input", workspace["data"], "--max-lag", "20", "--out", str(out)]) == EXIT_OK
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["patient_id", "lag", "value", "band95", "band99"]
    assert len(frame) == 2 * 21
    assert frame[frame["lag"] == 0]["value"].to_numpy() == pytest.approx(1.0)


class TestTrainAndEvaluate:
    def test_training_writes_model_and_history(self, workspace):
        assert workspace["history"].read_text().startswith("# config {")
        first = open(workspace["model"], encoding="utf-8").readline()
        assert json.loads(first)["format"] == "glucose-forecaster"

    def test_history_defaults_to_beside_the_model(self, workspace, tmp_path):
        model = tmp_path / "run" / "weights.jsonl"
        code = main(["train", "--config", workspace["config"], "--data", workspace["data"], "--model-out", str(model)])
        assert code == EXIT_OK
        history = read_report_csv(tmp_path / "run" / "weights_history.csv")
        assert list(history.columns) == ["epoch", "train_loss", "val_loss", "clip_threshold", "best"]
        assert len(history) >= 1

    def test_evaluate(self, workspace, tmp_path):
        out = tmp_path / "report.csv"
        code = main(["evaluate", "--config", workspace["config"], "--model", workspace["model"],
                     "--data", workspace["data"], "--out", str(out)])
        assert code == EXIT_OK
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# config {")
        frame = read_report_csv(out)
        assert sorted(frame["horizon"].unique()) == [1, 3]

    def test_horizon_beyond_the_model(self, workspace):
        code = main(["evaluate", "--model", workspace["model"], "--data", workspace["data"], "--horizons", "6"])
        assert code == EXIT_USAGE

    def test_missing_model(self, workspace, tmp_path):
        code = main(["evaluate", "--model", str(tmp_path / "none.jsonl"), "--data", workspace["data"]])
        assert code == EXIT_FAILURE


class TestForecast:
    def run(self, workspace, tmp_path, patient="P001", at="2021-01-04T02:00:00Z"):
        self.out = tmp_path / "forecast.csv"
        self.attention = tmp_path / "attention.csv"
        return main(["forecast", "--model", workspace["model"], "--data", workspace["data"],
                     "--patient", patient, "--at", at, "--out", str(self.out),
                     "--attention-out", str(self.attention)])

    def test_forecast(self, workspace, tmp_path):
        assert self.run(workspace, tmp_path) == EXIT_OK
        forecast = pd.read_csv(self.out)
        assert list(forecast.columns) == ["timestamp", "glucose_mgdl"]
        assert list(forecast["timestamp"]) == ["2021-01-04T02:05:00Z", "2021-01-04T02:10:00Z",
                                               "2021-01-04T02:15:00Z"]
        attention = pd.read_csv(self.attention)
        assert len(attention) == 3 * 2 * 8
        sums = attention.groupby(["step", "head"])["weight"].sum()
        assert sums.to_numpy() == pytest.approx(1.0)

    def test_insufficient_history(self, workspace, tmp_path):
        assert self.run(workspace, tmp_path, at="2021-01-04T00:10:00Z") == EXIT_FAILURE
        assert not self.out.exists()

    def test_anchor_after_the_data(self, workspace, tmp_path):
        assert self.run(workspace, tmp_path, at="2021-01-09T00:00:00Z") == EXIT_FAILURE
        assert not self.out.exists()

    def test_unknown_patient(self, workspace, tmp_path):
        assert self.run(workspace, tmp_path, patient="P999") == EXIT_FAILURE
