import json

import pytest

from refrec.cli import EXIT_OK, EXIT_USAGE, main
from pipeline_fixture import EXPECTED_SAMPLE_COUNT, write_fixture


@pytest.fixture
def dataset(tmp_path):
    gt = [100, 100, 300, 300]
    records = []
    for i, task in enumerate(["Attribute", "Position", "Interaction",
                              "Relation", "Commonsense"]):
        records.append({
            "id": f"s{i}", "image_ref": f"img{i}",
            "image_dims": {"width": 1000, "height": 1000},
            "expression": "the thing", "task": task, "gt": gt,
            "coord_units": "pixel",
            "meta": {"distractor_count": i},
        })
    records.append({
        "id": "r0", "image_ref": "imgr",
        "image_dims": {"width": 1000, "height": 1000},
        "expression": "the missing thing", "task": "Reject", "gt": None,
        "coord_units": "pixel",
    })
    path = tmp_path / "dataset.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in records))

    preds = {f"s{i}": "<think>.</think><answer>[100, 100, 300, 300]</answer>"
             for i in range(5)}
    preds["r0"] = "<think>.</think><answer>none</answer>"
    pred_path = tmp_path / "preds.jsonl"
    pred_path.write_text("".join(
        json.dumps({"id": k, "response_text": v}) + "\n" for k, v in preds.items()))
    return path, pred_path


class TestEval:
    def test_happy_path_writes_reports_and_figures(self, dataset, tmp_path):
        ds, preds, out = *dataset, tmp_path / "out"
        rc = main(["eval", "--dataset", str(ds), "--predictions", str(preds),
                   "--out", str(out), "--format", "markdown,csv,json",
                   "--buckets", "distractors=0,2,4"])
        assert rc == EXIT_OK
        for name in ("report.md", "report.csv", "report.json",
                     "config.resolved.json", "report.png"):
            assert (out / name).exists(), name
        report = json.loads((out / "report.json").read_text())
        assert report["aggregates"]["acc_o"] == pytest.approx(100.0)

    def test_no_figures_flag(self, dataset, tmp_path):
        ds, preds, out = *dataset, tmp_path / "out"
        rc = main(["eval", "--dataset", str(ds), "--predictions", str(preds),
                   "--out", str(out), "--no-figures"])
        assert rc == EXIT_OK
        assert not (out / "report.png").exists()

    def test_bad_dataset_is_usage_error(self, dataset, tmp_path):
        _, preds = dataset
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json\n")
        rc = main(["eval", "--dataset", str(bad), "--predictions", str(preds),
                   "--out", str(tmp_path / "out"), "--no-figures"])
        assert rc == EXIT_USAGE

    def test_config_file_with_flag_override(self, dataset, tmp_path, monkeypatch):
        ds, preds = dataset
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"format": "json"}))
        out = tmp_path / "out"
        rc = main(["--config", str(cfg), "eval", "--dataset", str(ds),
                   "--predictions", str(preds), "--out", str(out),
                   "--format", "csv", "--no-figures"])
        assert rc == EXIT_OK
        resolved = json.loads((out / "config.resolved.json").read_text())
        assert resolved["format"] == "csv"  # flag beats file
        assert (out / "report.csv").exists()
        assert not (out / "report.json").exists()


class TestTrainToy:
    def test_writes_logs_and_heldout(self, tmp_path):
        out = tmp_path / "run"
        rc = main(["train-toy", "--steps", "12", "--level", "easy",
                   "--out", str(out)])
        assert rc == EXIT_OK
        for name in ("trainlog.jsonl", "trainlog.csv", "heldout.json",
                     "config.resolved.json", "trainlog.png"):
            assert (out / name).exists(), name
        lines = (out / "trainlog.jsonl").read_text().splitlines()
        assert len(lines) == 12

    def test_zero_steps_is_usage_error(self, tmp_path):
        rc = main(["train-toy", "--steps", "0", "--out", str(tmp_path / "run")])
        assert rc == EXIT_USAGE

    def test_byte_identical_across_invocations(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["train-toy", "--steps", "10", "--seed", "7",
                         "--level", "medium", "--out", str(out)]) == EXIT_OK
            outs.append((out / "trainlog.jsonl").read_bytes())
        assert outs[0] == outs[1]


class TestCompareSchedules:
    def test_writes_comparison(self, tmp_path):
        out = tmp_path / "cmp"
        rc = main(["compare-schedules", "--steps", "10", "--level", "hard",
                   "--heldout-scenes", "5", "--out", str(out)])
        assert rc == EXIT_OK
        report = json.loads((out / "comparison.json").read_text())
        assert set(report["runs"]) == {"fixed", "dynamic"}
        for mode in ("fixed", "dynamic"):
            assert (out / f"trainlog.{mode}.jsonl").exists()
        assert (out / "comparison.png").exists()


class TestPipeline:
    def test_runs_fixture_end_to_end(self, tmp_path):
        manifest, script = write_fixture(tmp_path)
        clients = tmp_path / "clients.json"
        clients.write_text(json.dumps({"type": "mock", "script": script.name}))
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"retry_backoff": 0.0}))
        out = tmp_path / "out"
        rc = main(["--config", str(cfg), "pipeline", "--manifest", str(manifest),
                   "--clients", str(clients), "--out", str(out)])
        assert rc == EXIT_OK
        samples = (out / "samples.jsonl").read_text().splitlines()
        assert len(samples) == EXPECTED_SAMPLE_COUNT
        assert (out / "audit.jsonl").exists()
        assert (out / "config.resolved.json").exists()

    def test_missing_clients_config_is_usage_error(self, tmp_path):
        manifest, _ = write_fixture(tmp_path)
        rc = main(["pipeline", "--manifest", str(manifest),
                   "--clients", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "out")])
        assert rc != EXIT_OK


class TestScoreGroup:
    def test_prints_advantages(self, capsys):
        rc = main(["score-group", "--rewards", "1,0,1,1"])
        assert rc == EXIT_OK
        data = json.loads(capsys.readouterr().out)
        assert data["rewards"] == [1.0, 0.0, 1.0, 1.0]
        assert data["advantages"] == pytest.approx(
            [0.57735, -1.73205, 0.57735, 0.57735], abs=1e-5)

    def test_bad_rewards_is_usage_error(self):
        assert main(["score-group", "--rewards", "1,abc"]) == EXIT_USAGE


class TestVersion:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["--version"])
        assert e.value.code == 0
        assert "refrec" in capsys.readouterr().out
