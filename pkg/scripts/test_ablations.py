"""
Tests for the ablation sweep runner
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from mtscan.models import AblationRecord, ModelConfig, default_tasks
from mtscan.metrics import delta_m
from run_ablations import ABLATIONS, ctm_comparison, iter_variants, main, run_ablations, variant_config


def tiny_base():
    tasks = [t for t in default_tasks(2) if t.name in ("semseg", "depth")]
    return ModelConfig(C=4, N=2, K=2, tasks=tasks, dtype="f64", seed=1)


class TestVariants:
    def test_every_direction_drop_keeps_three(self):
        drops = [overrides for label, overrides, _ in ABLATIONS["directions"] if label.startswith("drop-")]
        assert len(drops) == 4
        assert all(len(o["scan_directions"]) == 3 for o in drops)

    def test_variant_config_revalidates(self):
        cfg = variant_config(tiny_base(), {"scan_directions": ["D4", "D2"]}, None)
        assert cfg.scan_directions == ["D2", "D4"]
        with pytest.raises(ValueError):
            variant_config(tiny_base(), {"scan_directions": []}, None)

    def test_task_subset(self):
        cfg = variant_config(tiny_base(), {"alpha": 3}, ["depth"])
        assert [t.name for t in cfg.tasks] == ["depth"] and cfg.alpha == 3
        with pytest.raises(ValueError):
            variant_config(tiny_base(), {}, ["normal"])

    def test_unknown_ablation(self):
        with pytest.raises(ValueError):
            list(iter_variants(["everything"]))


def test_stage_sweep_runs_end_to_end():
    records = list(run_ablations(tiny_base(), ["stages"], steps=1, size=32, dataset_size=2,
                                 eval_size=2, batch_size=2))
    assert [r.variant for r in records] == ["stages=1", "stages=2", "stages=3"]
    assert all(np.isfinite(r.final_loss) and np.isfinite(r.eval_loss) and np.isfinite(r.delta_m) for r in records)
    assert all(r.seed == 1 and r.baseline == "stl" for r in records)
    assert all(r.report.task_names == ["semseg", "depth"] for r in records)


def test_main_writes_json_lines(tmp_path):
    config = tmp_path / "base.json"
    config.write_text(tiny_base().model_dump_json())
    out = tmp_path / "ablations.jsonl"
    code = main(["--ablation", "head", "--config", str(config), "--steps", "1", "--size", "32",
                 "--dataset-size", "2", "--eval-size", "2", "--batch-size", "2", "--out", str(out)])
    assert code == 0
    records = [AblationRecord.model_validate_json(line) for line in out.read_text().splitlines()]
    assert [r.variant for r in records] == ["dense", "lite"]


def test_ctm_sweep_over_seeds_adds_comparison_rows():
    records = list(run_ablations(tiny_base(), ["ctm"], steps=1, size=32, dataset_size=2,
                                 eval_size=2, batch_size=2, seeds=[4, 5]))
    assert [(r.seed, r.variant) for r in records] == [
        (seed, variant) for seed in (4, 5) for variant in ("none", "F-CTM", "S-CTM", "S-CTM vs none")
    ]
    for seed in (4, 5):
        rows = {r.variant: r for r in records if r.seed == seed}
        comparison = rows["S-CTM vs none"]
        assert comparison.baseline == "none"
        assert comparison.eval_loss == rows["S-CTM"].eval_loss
        assert comparison.delta_m == pytest.approx(delta_m(rows["S-CTM"].report, rows["none"].report))

    summary = ctm_comparison(records)
    assert summary["seeds"] == 2
    assert 0 <= summary["s_vs_none_dm_nonneg"] <= 2 and 0 <= summary["s_vs_f_eval_loss_le"] <= 2


def test_seeds_change_the_data():
    first, second = (list(run_ablations(tiny_base(), ["head"], steps=1, size=32, dataset_size=2,
                                        eval_size=2, batch_size=2, seeds=[seed]))[0] for seed in (1, 2))
    assert first.eval_loss != second.eval_loss


def test_main_repeats_over_seeds(tmp_path, capsys):
    config = tmp_path / "base.json"
    config.write_text(tiny_base().model_dump_json())
    out = tmp_path / "ablations.jsonl"
    code = main(["--ablation", "head", "--config", str(config), "--steps", "1", "--size", "32", "--seeds", "1", "2",
                 "--dataset-size", "2", "--eval-size", "2", "--batch-size", "2", "--out", str(out)])
    assert code == 0
    records = [AblationRecord.model_validate_json(line) for line in out.read_text().splitlines()]
    assert [(r.seed, r.variant) for r in records] == [(1, "dense"), (1, "lite"), (2, "dense"), (2, "lite")]
    assert "ctm_comparison" not in capsys.readouterr().out
