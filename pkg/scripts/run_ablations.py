"""
Ablation sweeps at desk scale.
Trains each decoder variant on the synthetic dataset and reports Δ_m against
single-task baselines trained with the same step budget, one JSON line per variant
and seed.

Usage:
    python scripts/run_ablations.py --ablation ctm directions --steps 200 --seeds 1 2 3 4 5 --out ablations.jsonl
"""

import argparse
import json
import logging
import os
import sys
from typing import Dict, Iterator, List, Optional, Tuple

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from mtscan.config import Config
from mtscan.data import make_dataset
from mtscan.main import EVAL_SEED_OFFSET, load_config
from mtscan.metrics import delta_m, report_as_dict
from mtscan.models import DIRECTION_NAMES, AblationRecord, MetricReport, ModelConfig
from mtscan.trainer import train, train_single_task_baselines
from mtscan.utils import setup_logging

logger = logging.getLogger(Config.LOGGER_NAME)

# (variant label, ModelConfig overrides, task subset or None for every configured task)
Variant = Tuple[str, dict, Optional[List[str]]]

ABLATIONS: Dict[str, List[Variant]] = {
    "ctm": [
        ("none", {"ctm_variant": "none"}, None),
        ("F-CTM", {"ctm_variant": "F"}, None),
        ("S-CTM", {"ctm_variant": "S"}, None),
    ],
    "directions": [("all", {}, None)] + [
        (f"drop-{name}", {"scan_directions": [d for d in DIRECTION_NAMES if d != name]}, None)
        for name in DIRECTION_NAMES
    ],
    "alpha": [
        (f"alpha={alpha} {'+'.join(subset)}", {"alpha": alpha}, list(subset))
        for subset in (("semseg", "depth"), ("semseg", "depth", "normal", "boundary"))
        for alpha in (1, 2, 3)
    ],
    "stages": [(f"stages={s}", {"stages_enabled": s}, None) for s in (1, 2, 3)],
    "mixer": [
        ("ssm", {"mixer": "ssm"}, None),
        ("attention", {"mixer": "attention"}, None),
    ],
    "head": [
        ("dense", {"head": "dense"}, None),
        ("lite", {"head": "lite"}, None),
    ],
}


def variant_config(base: ModelConfig, overrides: dict, tasks: Optional[List[str]]) -> ModelConfig:
    """Apply overrides (and a task subset) to the base config, re-running validation"""
    data = base.model_dump()
    data.update(overrides)
    if tasks is not None:
        by_name = {t["name"]: t for t in data["tasks"]}
        missing = [name for name in tasks if name not in by_name]
        if missing:
            raise ValueError(f"base config has no tasks {missing}")
        data["tasks"] = [by_name[name] for name in tasks]
    return ModelConfig.model_validate(data)


def iter_variants(names: List[str]) -> Iterator[Tuple[str, Variant]]:
    for name in names:
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}, expected one of {sorted(ABLATIONS)}")
        for variant in ABLATIONS[name]:
            yield name, variant


def _train_variant(cfg: ModelConfig, train_scenes, eval_scenes, steps: int, lr: float, batch_size: int):
    result = train(cfg, train_scenes, steps, lr=lr, batch_size=batch_size,
                   eval_scenes=eval_scenes, eval_interval=steps)
    return result.losses[-1], result.evaluation


def run_ablations(base: ModelConfig, names: List[str], steps: int, size: int, dataset_size: int,
                  eval_size: int, batch_size: int = Config.BATCH_SIZE,
                  lr: float = Config.LEARNING_RATE,
                  seeds: Optional[List[int]] = None) -> Iterator[AblationRecord]:
    """
    Train every variant of the named ablations once per seed

    Baselines are trained once per (seed, task subset) and reused across variants.
    After the ctm sweep of each seed an extra "S-CTM vs none" row compares
    the cross-scan decoder against the decoder without cross-task blocks.

    Yields:
        AblationRecord per variant and seed, in sweep order
    """
    for seed in seeds or [base.seed]:
        seeded = base.model_copy(update={"seed": seed})
        train_scenes = make_dataset(seed, dataset_size, size, size, base.K)
        eval_scenes = make_dataset(seed + EVAL_SEED_OFFSET, eval_size, size, size, base.K)
        baselines: Dict[Tuple[str, ...], MetricReport] = {}
        ctm_records: Dict[str, AblationRecord] = {}

        for ablation, (label, overrides, tasks) in iter_variants(names):
            cfg = variant_config(seeded, overrides, tasks)
            key = tuple(t.name for t in cfg.tasks)
            if key not in baselines:
                logger.info(f"Training single-task baselines for {'+'.join(key)} (seed {seed})")
                baselines[key] = train_single_task_baselines(cfg, train_scenes, steps, eval_scenes=eval_scenes,
                                                             lr=lr, batch_size=batch_size, eval_interval=steps)
            logger.info(f"[{ablation}] {label} (seed {seed})")
            final_loss, evaluation = _train_variant(cfg, train_scenes, eval_scenes, steps, lr, batch_size)
            record = AblationRecord(ablation=ablation, variant=label, seed=seed, overrides=overrides,
                                    tasks=list(key), steps=steps, final_loss=final_loss,
                                    eval_loss=evaluation.loss,
                                    delta_m=delta_m(evaluation.report, baselines[key]),
                                    report=evaluation.report)
            if ablation == "ctm":
                ctm_records[label] = record
            yield record

        if "S-CTM" in ctm_records and "none" in ctm_records:
            scan, plain = ctm_records["S-CTM"], ctm_records["none"]
            yield scan.model_copy(update={"variant": "S-CTM vs none", "baseline": "none",
                                          "delta_m": delta_m(scan.report, plain.report)})


def ctm_comparison(records: List[AblationRecord]) -> Dict[str, int]:
    """
    Per-seed wins of the cross-scan decoder

    Returns:
        {"seeds", "s_vs_none_dm_nonneg", "s_vs_f_eval_loss_le"} counted over seeds with a full ctm sweep
    """
    by_seed: Dict[int, Dict[str, AblationRecord]] = {}
    for record in records:
        if record.ablation == "ctm":
            by_seed.setdefault(record.seed, {})[record.variant] = record
    complete = [rows for rows in by_seed.values() if {"S-CTM", "F-CTM", "S-CTM vs none"} <= set(rows)]
    return {
        "seeds": len(complete),
        "s_vs_none_dm_nonneg": sum(rows["S-CTM vs none"].delta_m >= 0 for rows in complete),
        "s_vs_f_eval_loss_le": sum(rows["S-CTM"].eval_loss <= rows["F-CTM"].eval_loss for rows in complete),
    }


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Decoder ablation sweeps on the synthetic dataset")
    parser.add_argument("--ablation", nargs="+", choices=sorted(ABLATIONS) + ["all"], default=["all"],
                        help="Ablations to run")
    parser.add_argument("--config", default=None, help="Base ModelConfig JSON (defaults if omitted)")
    parser.add_argument("--steps", type=int, default=200, help="Optimizer steps per model")
    parser.add_argument("--seed", type=int, default=None, help="Overrides the config seed")
    parser.add_argument("--seeds", type=int, nargs="+", default=None,
                        help="Repeat every sweep over these seeds (overrides --seed)")
    parser.add_argument("--size", type=int, default=Config.IMAGE_SIZE, help="Image height and width")
    parser.add_argument("--dataset-size", type=int, default=Config.DATASET_SIZE, help="Training scenes")
    parser.add_argument("--eval-size", type=int, default=Config.EVAL_SIZE, help="Held-out scenes")
    parser.add_argument("--batch-size", type=int, default=Config.BATCH_SIZE)
    parser.add_argument("--lr", type=float, default=Config.LEARNING_RATE)
    parser.add_argument("--out", default="ablations.jsonl", help="JSON-lines output path")
    parser.add_argument("--log-level", default=None)
    args = parser.parse_args(argv)

    setup_logging(args.log_level)
    names = sorted(ABLATIONS) if "all" in args.ablation else args.ablation
    base = load_config(args.config, args.seed)
    seeds = args.seeds or [base.seed]

    print("=" * 60)
    print(f"Ablations: {', '.join(names)} | {args.steps} steps | {args.size}x{args.size} | seeds {seeds}")
    print("=" * 60)
    records = []
    with open(args.out, "w") as handle:
        for record in run_ablations(base, names, args.steps, args.size, args.dataset_size,
                                    args.eval_size, args.batch_size, args.lr, seeds=seeds):
            handle.write(record.model_dump_json() + "\n")
            handle.flush()
            metrics = " ".join(f"{name}={value:.4f}" for name, value in report_as_dict(record.report).items())
            print(f"{record.ablation:<11} {record.variant:<40} seed {record.seed:<5} "
                  f"Δ_m {record.delta_m:+7.2f} vs {record.baseline:<5} eval loss {record.eval_loss:.4f}  {metrics}")
            records.append(record)
    if "ctm" in names:
        summary = ctm_comparison(records)
        logger.info(f"ctm comparison: {summary}")
        print(json.dumps({"ctm_comparison": summary}))
    print(f"\n{len(records)} rows written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
