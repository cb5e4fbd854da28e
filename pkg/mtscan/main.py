"""
Command-Line Entry Point
Verification, benchmarking, training, evaluation and reporting commands

Exit codes: 0 success, 1 failed verification or diverged run, 2 usage,
config or checkpoint error. Failures print one JSON line
{"error": kind, "message": text} on stderr.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from mtscan import __version__
from mtscan.bench import IMPLS, loglog_slope, run_bench, write_csv
from mtscan.config import Config, config
from mtscan.data import cached_dataset, make_dataset
from mtscan.errors import ConfigError, DivergenceError, MtscanError, NonFiniteError, VerificationError
from mtscan.gradcheck import SCOPES, run_scope
from mtscan.metrics import delta_m, report_as_dict
from mtscan.models import MetricReport, ModelConfig
from mtscan.network import count_params_flops
from mtscan.oracles import run_all
from mtscan.trainer import evaluate, load_model, train, train_single_task_baselines
from mtscan.utils import setup_logging

logger = logging.getLogger(Config.LOGGER_NAME)

REPORT_NAME = "report.json"
STL_REPORT_NAME = "stl_report.json"
# Eval scenes come from a seed disjoint from the training scenes
EVAL_SEED_OFFSET = 1_000_003


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises ConfigError instead of exiting on bad usage"""

    def error(self, message: str):
        raise ConfigError(f"{self.prog}: {message}")


# ============================================================================
# Helpers
# ============================================================================

def _parse_lengths(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"--lengths must be comma-separated integers: {e}")


def load_config(path: Optional[str], seed: Optional[int] = None) -> ModelConfig:
    """
    ModelConfig from a JSON file (defaults if None); MTK_DTYPE fills a missing dtype

    Raises:
        ConfigError: unreadable file or schema violation
    """
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}")
    data.setdefault("dtype", Config.MTK_DTYPE)
    if seed is not None:
        data["seed"] = seed
    try:
        return ModelConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid model config: {e}")


def load_report(path: str) -> MetricReport:
    try:
        return MetricReport.model_validate_json(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read metric report {path}: {e}")
    except ValidationError as e:
        raise ConfigError(f"invalid metric report {path}: {e}")


def _split(cfg: ModelConfig, args: argparse.Namespace, seed: int, count: int):
    if args.data_cache:
        return cached_dataset(args.data_cache, seed, count, args.size, args.size, cfg.K)
    return make_dataset(seed, count, args.size, args.size, cfg.K)


def _train_scenes(cfg: ModelConfig, args: argparse.Namespace):
    return _split(cfg, args, cfg.seed, args.dataset_size)


def _eval_scenes(cfg: ModelConfig, args: argparse.Namespace):
    return _split(cfg, args, cfg.seed + EVAL_SEED_OFFSET, args.eval_size)


# ============================================================================
# Commands
# ============================================================================

def cmd_gradcheck(args: argparse.Namespace) -> int:
    entries = run_scope(args.scope, seed=args.seed, eps=args.eps, tol=args.tol,
                        max_entries=args.max_entries, full=args.full)
    for entry in entries:
        status = "PASS" if entry.passed else "FAIL"
        print(f"{status} {entry.suite:<24} {entry.parameter:<40} {entry.max_rel_err:.3e} "
              f"({entry.checked}/{entry.size} entries)")
    checked, total = sum(e.checked for e in entries), sum(e.size for e in entries)
    print(f"compared {checked} of {total} entries" + ("" if checked == total else "; --full compares all"))
    failed = [e for e in entries if not e.passed]
    if failed:
        raise VerificationError(f"{len(failed)} of {len(entries)} gradient checks exceed tol {args.tol:g}")
    logger.info(f"gradcheck {args.scope}: {len(entries)} checks passed")
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    entries = run_all(seed=args.seed, instances=args.instances)
    for entry in entries:
        status = "PASS" if entry.passed else "FAIL"
        print(f"{status} {entry.suite:<20} {entry.case:<36} {entry.max_abs_diff:.3e} (tol {entry.tol:g})")
    failed = [e for e in entries if not e.passed]
    if failed:
        raise VerificationError(f"{len(failed)} of {len(entries)} oracle comparisons exceed tolerance")
    return 0


def cmd_scan_bench(args: argparse.Namespace) -> int:
    rows = run_bench(_parse_lengths(args.lengths), impls=args.impl, repeats=args.repeats,
                     channels=args.channels, parallel=args.parallel, seed=args.seed)
    slopes = loglog_slope(rows)
    if args.out:
        with open(args.out, "w", newline="") as handle:
            write_csv(rows, handle)
        print(json.dumps({"slopes": slopes}))
    else:
        write_csv(rows, sys.stdout)
        print(json.dumps({"slopes": slopes}), file=sys.stderr)
    for impl, slope in slopes.items():
        logger.info(f"scan-bench {impl}: log-log slope {slope:.3f}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.seed)
    out_dir = Path(args.out)
    train_scenes, eval_scenes = _train_scenes(cfg, args), _eval_scenes(cfg, args)
    result = train(cfg, train_scenes, args.steps, lr=args.lr, weight_decay=args.weight_decay,
                   batch_size=args.batch_size, eval_scenes=eval_scenes,
                   eval_interval=args.eval_interval, out_dir=out_dir)
    report = result.evaluation.report
    logger.info(f"Eval metrics: {report_as_dict(report)}")
    (out_dir / REPORT_NAME).write_text(report.model_dump_json(indent=2))
    if args.baselines:
        stl = train_single_task_baselines(cfg, train_scenes, args.steps, eval_scenes=eval_scenes,
                                          lr=args.lr, weight_decay=args.weight_decay,
                                          batch_size=args.batch_size, eval_interval=args.eval_interval)
        (out_dir / STL_REPORT_NAME).write_text(stl.model_dump_json(indent=2))
        logger.info(f"Δ_m vs single-task baselines: {delta_m(report, stl):+.2f}")
    print(report.model_dump_json())
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_model(args.out)
    cfg = model.config if args.seed is None else model.config.model_copy(update={"seed": args.seed})
    eval_scenes = _eval_scenes(cfg, args)
    evaluation = evaluate(model, eval_scenes, args.batch_size)
    print(evaluation.report.model_dump_json())
    return 0


def cmd_dm(args: argparse.Namespace) -> int:
    print(f"{delta_m(load_report(args.mtl), load_report(args.stl)):+.2f}")
    return 0


def cmd_count(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    print(json.dumps(count_params_flops(cfg, args.size, args.size)))
    return 0


def cmd_dump_config(args: argparse.Namespace) -> int:
    if args.env:
        config.print_config()
        if not config.validate():
            raise ConfigError("environment settings are invalid")
        return 0
    print(load_config(None).model_dump_json(indent=2))
    return 0


# ============================================================================
# Parser
# ============================================================================

def _add_data_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--size", type=int, default=Config.IMAGE_SIZE, help="Image height and width")
    parser.add_argument("--dataset-size", type=int, default=Config.DATASET_SIZE, help="Training scenes")
    parser.add_argument("--eval-size", type=int, default=Config.EVAL_SIZE, help="Held-out scenes")
    parser.add_argument("--batch-size", type=int, default=Config.BATCH_SIZE)
    parser.add_argument("--data-cache", default=None, help="Directory caching generated scenes (MTKP + index.json)")


def build_parser() -> CliParser:
    parser = CliParser(prog="mtscan", description="Selective-scan multi-task decoder toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="Overrides LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="Finite-difference gradient checks")
    p.add_argument("--scope", choices=SCOPES, default="kernels")
    p.add_argument("--seed", type=int, default=Config.SEED)
    p.add_argument("--eps", type=float, default=Config.GRADCHECK_EPS)
    p.add_argument("--tol", type=float, default=Config.GRADCHECK_TOL)
    p.add_argument("--max-entries", type=int, default=None,
                   help=f"Entries sampled per leaf (default {Config.GRADCHECK_MAX_ENTRIES}, 2 for the model scope)")
    p.add_argument("--full", action="store_true", help="Compare every entry of every leaf")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle", help="Kernels against brute-force references")
    p.add_argument("--seed", type=int, default=Config.SEED)
    p.add_argument("--instances", type=int, default=100, help="Random kernel-oracle instances")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("scan-bench", help="Scan vs attention scaling benchmark (CSV)")
    p.add_argument("--lengths", default=",".join(str(v) for v in Config.BENCH_LENGTHS))
    p.add_argument("--impl", nargs="+", choices=IMPLS, default=list(IMPLS))
    p.add_argument("--repeats", type=int, default=Config.BENCH_REPEATS)
    p.add_argument("--channels", type=int, default=Config.BENCH_CHANNELS)
    p.add_argument("--parallel", action="store_true", help="Allow MTK_THREADS workers in the chunked scan")
    p.add_argument("--seed", type=int, default=Config.SEED)
    p.add_argument("--out", default=None, help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_scan_bench)

    p = sub.add_parser("train", help="Train on the synthetic multi-task dataset")
    p.add_argument("--config", default=None, help="ModelConfig JSON (defaults if omitted)")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=None, help="Overrides the config seed")
    p.add_argument("--out", required=True, help="Run directory")
    p.add_argument("--lr", type=float, default=Config.LEARNING_RATE)
    p.add_argument("--weight-decay", type=float, default=Config.WEIGHT_DECAY)
    p.add_argument("--eval-interval", type=int, default=Config.EVAL_INTERVAL)
    p.add_argument("--baselines", action="store_true", help="Also train single-task baselines and report Δ_m")
    _add_data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a trained run directory")
    p.add_argument("--out", required=True, help="Run directory written by train")
    p.add_argument("--seed", type=int, default=None, help="Overrides the config seed for eval scenes")
    _add_data_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dm", help="Multi-task relative improvement of two metric reports")
    p.add_argument("--mtl", required=True)
    p.add_argument("--stl", required=True)
    p.set_defaults(func=cmd_dm)

    p = sub.add_parser("count", help="Parameters and forward FLOPs")
    p.add_argument("--config", default=None)
    p.add_argument("--size", type=int, default=Config.IMAGE_SIZE)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("dump-config", help="Print the default model config (or env settings)")
    p.add_argument("--env", action="store_true")
    p.set_defaults(func=cmd_dump_config)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        setup_logging(args.log_level)
        return args.func(args)
    except (VerificationError, DivergenceError, NonFiniteError) as e:
        return _fail(e.kind, str(e), 1)
    except MtscanError as e:
        return _fail(e.kind, str(e), 2)
    except ValidationError as e:
        return _fail(ConfigError.kind, str(e), 2)
    except ValueError as e:
        return _fail("usage", str(e), 2)


if __name__ == "__main__":
    sys.exit(main())
