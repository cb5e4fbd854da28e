"""
Tests for the mtscan command line: outputs, exit codes and error lines
"""

import json
import os
import sys

import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from mtscan import main as main_module
from mtscan.bench import CSV_HEADER
from mtscan.main import EVAL_SEED_OFFSET, REPORT_NAME, main
from mtscan.models import MetricEntry, MetricReport, ModelConfig, default_tasks
from mtscan.network import MultiTaskModel
from mtscan.trainer import CHECKPOINT_NAME, save_model

STL_ROW = (54.32, 0.5166, 19.21, 77.30)
SCTM_ROW = (57.01, 0.4818, 18.27, 79.40)


def write_report(path, values):
    entries = [MetricEntry(name=t.name, metric=t.metric, value=v, higher_better=t.higher_better)
               for t, v in zip(default_tasks(4), values)]
    path.write_text(MetricReport(entries=entries, scale="percent").model_dump_json())
    return str(path)


def tiny_config_file(tmp_path):
    tasks = [t for t in default_tasks(2) if t.name in ("semseg", "depth")]
    config = ModelConfig(C=4, N=2, K=2, tasks=tasks, dtype="f64", seed=3)
    path = tmp_path / "tiny.json"
    path.write_text(config.model_dump_json())
    return config, str(path)


def error_line(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


class TestDeltaM:
    def test_published_rows(self, tmp_path, capsys):
        code = main(["dm", "--mtl", write_report(tmp_path / "mtl.json", SCTM_ROW),
                     "--stl", write_report(tmp_path / "stl.json", STL_ROW)])
        assert code == 0
        assert capsys.readouterr().out.strip() == "+4.82"

    def test_identical_reports(self, tmp_path, capsys):
        path = write_report(tmp_path / "stl.json", STL_ROW)
        assert main(["dm", "--mtl", path, "--stl", path]) == 0
        assert capsys.readouterr().out.strip() == "+0.00"

    def test_missing_report(self, tmp_path, capsys):
        path = write_report(tmp_path / "stl.json", STL_ROW)
        assert main(["dm", "--mtl", str(tmp_path / "absent.json"), "--stl", path]) == 2
        assert error_line(capsys)["error"] == "config"


class TestUsageErrors:
    def test_missing_required_flag(self, capsys):
        assert main(["train", "--out", "run"]) == 2
        line = error_line(capsys)
        assert line["error"] == "config" and "--steps" in line["message"]

    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 2
        assert error_line(capsys)["error"] == "config"

    def test_descending_bench_lengths(self, capsys):
        assert main(["scan-bench", "--lengths", "64,32", "--repeats", "1"]) == 2
        assert error_line(capsys)["error"] == "usage"

    def test_invalid_config_file(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"C": 0}))
        assert main(["count", "--config", str(path)]) == 2
        assert error_line(capsys)["error"] == "config"


class TestCheckpointErrors:
    def test_corrupt_magic(self, tmp_path, capsys):
        config, _ = tiny_config_file(tmp_path)
        run = tmp_path / "run"
        save_model(MultiTaskModel(config), run)
        payload = (run / CHECKPOINT_NAME).read_bytes()
        (run / CHECKPOINT_NAME).write_bytes(b"JUNK" + payload[4:])
        assert main(["eval", "--out", str(run), "--size", "32", "--eval-size", "1"]) == 2
        assert error_line(capsys)["error"] == "checkpoint"

    def test_missing_run_directory(self, tmp_path, capsys):
        assert main(["eval", "--out", str(tmp_path / "nothing")]) == 2
        assert error_line(capsys)["error"] == "checkpoint"


class TestCommands:
    def test_dump_config_is_a_valid_model_config(self, capsys):
        assert main(["dump-config"]) == 0
        ModelConfig.model_validate_json(capsys.readouterr().out)

    def test_dump_env(self, capsys):
        assert main(["dump-config", "--env"]) == 0
        assert "Threads" in capsys.readouterr().out

    def test_count(self, tmp_path, capsys):
        _, path = tiny_config_file(tmp_path)
        assert main(["count", "--config", path, "--size", "32"]) == 0
        counts = json.loads(capsys.readouterr().out)
        assert counts["params"] > 0 and counts["flops"] == sum(counts["flops_by_kind"].values())

    def test_oracle(self, capsys):
        assert main(["oracle", "--instances", "3"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") > 3

    def test_gradcheck_failure_exit_code(self, capsys):
        assert main(["gradcheck", "--scope", "kernels", "--tol", "0"]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_gradcheck_reports_sampled_entries(self, capsys):
        assert main(["gradcheck", "--scope", "kernels", "--max-entries", "1"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert all(line.endswith(" entries)") and "(1/" in line for line in lines[:-1])
        assert lines[-1].startswith("compared ") and lines[-1].endswith("--full compares all")

    def test_scan_bench_to_file(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        assert main(["scan-bench", "--lengths", "8,16", "--impl", "seq", "attention",
                     "--repeats", "1", "--channels", "4", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == ",".join(CSV_HEADER) and len(lines) == 5
        assert set(json.loads(capsys.readouterr().out)["slopes"]) == {"seq", "attention"}

    def test_scan_bench_to_stdout(self, capsys):
        assert main(["scan-bench", "--lengths", "8", "--impl", "chunked", "--repeats", "1", "--channels", "4"]) == 0
        captured = capsys.readouterr()
        assert captured.out.splitlines()[0] == ",".join(CSV_HEADER)
        assert json.loads(captured.err.strip().splitlines()[-1]) == {"slopes": {}}

    def test_train_then_eval(self, tmp_path, capsys):
        _, path = tiny_config_file(tmp_path)
        run = tmp_path / "run"
        data_flags = ["--size", "32", "--dataset-size", "2", "--eval-size", "2", "--batch-size", "2"]
        assert main(["train", "--config", path, "--steps", "1", "--out", str(run)] + data_flags) == 0
        printed = MetricReport.model_validate_json(capsys.readouterr().out)
        saved = MetricReport.model_validate_json((run / REPORT_NAME).read_text())
        assert printed == saved
        assert saved.task_names == ["semseg", "depth"]

        assert main(["eval", "--out", str(run)] + data_flags) == 0
        evaluated = MetricReport.model_validate_json(capsys.readouterr().out)
        assert [e.value for e in evaluated.entries] == pytest.approx([e.value for e in saved.entries])

    def test_train_and_eval_through_data_cache(self, tmp_path, capsys):
        _, path = tiny_config_file(tmp_path)
        run, cache = tmp_path / "run", tmp_path / "cache"
        data_flags = ["--size", "32", "--dataset-size", "2", "--eval-size", "1", "--batch-size", "2",
                      "--data-cache", str(cache)]
        assert main(["train", "--config", path, "--steps", "1", "--out", str(run)] + data_flags) == 0
        trained = MetricReport.model_validate_json(capsys.readouterr().out)
        assert sorted(p.name for p in cache.iterdir()) == ["seed1000006_32x32_k2_n1", "seed3_32x32_k2_n2"]

        assert main(["eval", "--out", str(run)] + data_flags) == 0
        evaluated = MetricReport.model_validate_json(capsys.readouterr().out)
        assert [e.value for e in evaluated.entries] == pytest.approx([e.value for e in trained.entries])

    def test_eval_builds_only_the_eval_split(self, tmp_path, capsys, monkeypatch):
        config, _ = tiny_config_file(tmp_path)
        run = tmp_path / "run"
        save_model(MultiTaskModel(config), run)
        seeds = []
        real = main_module.make_dataset

        def recording(seed, count, *args, **kwargs):
            seeds.append((seed, count))
            return real(seed, count, *args, **kwargs)

        monkeypatch.setattr(main_module, "make_dataset", recording)
        assert main(["eval", "--out", str(run), "--size", "32", "--dataset-size", "5", "--eval-size", "1"]) == 0
        assert seeds == [(config.seed + EVAL_SEED_OFFSET, 1)]
