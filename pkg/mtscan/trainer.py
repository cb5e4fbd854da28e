"""
Training Loop
Multi-task training, evaluation, and single-task baselines for Δ_m
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Union

from mtscan import checkpoint
from mtscan.config import Config
from mtscan.data import SyntheticScene, iterate_batches, make_batch, sequential_batches
from mtscan.errors import CheckpointError, ConfigError, DivergenceError
from mtscan.losses import task_loss
from mtscan.metrics import MetricAccumulator
from mtscan.models import MetricRecord, MetricReport, ModelConfig
from mtscan.network import MultiTaskModel
from mtscan.nn import watch_all
from mtscan.optim import AdamW, poly_lr
from mtscan.tensor import Tape
from mtscan.utils import make_rng

logger = logging.getLogger(Config.LOGGER_NAME)

CHECKPOINT_NAME = "model.mtkp"
CONFIG_NAME = "config.json"
METRICS_NAME = "metrics.jsonl"
KNOWN_TASKS = ("semseg", "depth", "normal", "boundary")


class Evaluation(NamedTuple):
    report: MetricReport
    loss: float


@dataclass
class TrainResult:
    """Outcome of one training run"""
    model: MultiTaskModel
    losses: List[float] = field(default_factory=list)
    evaluation: Optional[Evaluation] = None
    checkpoint_path: Optional[Path] = None
    metrics_path: Optional[Path] = None


def _check_tasks(config: ModelConfig) -> None:
    unknown = [t.name for t in config.tasks if t.name not in KNOWN_TASKS]
    if unknown:
        raise ConfigError(f"synthetic data has no labels for tasks {unknown}")


def evaluate(model: MultiTaskModel, scenes: Sequence[SyntheticScene],
             batch_size: int = Config.BATCH_SIZE, step: Optional[int] = None) -> Evaluation:
    """
    Metrics and summed per-task loss over `scenes`, in eval mode

    Returns:
        Evaluation(report, loss averaged over batches)
    """
    if not scenes:
        raise ValueError("evaluation needs at least one scene")
    was_training = model.training
    model.eval()
    tasks = model.config.tasks
    accumulators = [MetricAccumulator(task) for task in tasks]
    loss_total, batches = 0.0, 0
    try:
        for chunk in sequential_batches(scenes, batch_size):
            image, targets = make_batch(chunk, model.task_names, model.dtype)
            preds = model(image)
            for task, acc in zip(tasks, accumulators):
                acc.update(preds[task.name].data, targets[task.name])
                loss_total += task_loss(task, preds[task.name], targets[task.name]).item()
            batches += 1
    finally:
        model.train(was_training)
    report = MetricReport(entries=[acc.entry() for acc in accumulators], step=step)
    return Evaluation(report=report, loss=loss_total / batches)


def save_model(model: MultiTaskModel, out_dir: Union[str, Path]) -> Path:
    """Write config.json and the MTKP checkpoint into out_dir"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_NAME).write_text(model.config.model_dump_json(indent=2))
    return checkpoint.save(out_dir / CHECKPOINT_NAME, model.state_dict())


def load_model(out_dir: Union[str, Path], config: Optional[ModelConfig] = None) -> MultiTaskModel:
    """
    Rebuild a model from out_dir (config.json unless `config` is given) and load its weights

    Raises:
        CheckpointError: missing or malformed checkpoint/config
    """
    out_dir = Path(out_dir)
    if config is None:
        config_path = out_dir / CONFIG_NAME
        if not config_path.exists():
            raise CheckpointError(f"no model config at {config_path}")
        config = ModelConfig.model_validate(json.loads(config_path.read_text()))
    model = MultiTaskModel(config)
    model.load_state_dict(checkpoint.load(out_dir / CHECKPOINT_NAME))
    return model


def train(config: ModelConfig, scenes: Sequence[SyntheticScene], steps: int,
          lr: float = Config.LEARNING_RATE, weight_decay: float = Config.WEIGHT_DECAY,
          batch_size: int = Config.BATCH_SIZE, eval_scenes: Optional[Sequence[SyntheticScene]] = None,
          eval_interval: int = Config.EVAL_INTERVAL, out_dir: Optional[Union[str, Path]] = None) -> TrainResult:
    """
    Train a multi-task model with AdamW and the poly schedule

    The total loss is the unweighted sum of task losses. Every
    `eval_interval` steps (and after the last one) the model is evaluated
    on `eval_scenes` and one MetricRecord per task is appended to
    out_dir/metrics.jsonl.

    Args:
        config: Model configuration (its seed also orders the batches)
        scenes: Training scenes
        steps: Optimizer steps (>= 1)
        lr: Base learning rate
        weight_decay: Decoupled weight decay
        batch_size: Scenes per step
        eval_scenes: Held-out scenes (training scenes if None)
        eval_interval: Steps between evaluations
        out_dir: Directory for checkpoint, config and metric log (nothing written if None)

    Returns:
        TrainResult

    Raises:
        DivergenceError: loss became NaN/Inf
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    _check_tasks(config)
    eval_scenes = scenes if eval_scenes is None else eval_scenes
    model = MultiTaskModel(config)
    model.train()
    optimizer = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    batches = iterate_batches(scenes, batch_size, make_rng(config.seed, 7))

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_path = out_path / METRICS_NAME
        metrics_path.write_text("")

    result = TrainResult(model=model, metrics_path=metrics_path)
    logger.info(f"Training {len(config.tasks)} tasks, ctm={config.ctm_variant}, mixer={config.mixer}, "
                f"{model.num_parameters()} params, {steps} steps")

    for it in range(steps):
        step_lr = poly_lr(lr, it, steps)
        image, targets = make_batch(next(batches), model.task_names, model.dtype)
        with Tape() as tape:
            watch_all(tape, model)
            preds = model(image)
            per_task = {task.name: task_loss(task, preds[task.name], targets[task.name]) for task in config.tasks}
            total = None
            for value in per_task.values():
                total = value if total is None else total + value
            loss_value = total.item()
            if not math.isfinite(loss_value):
                detail = ", ".join(f"{name}={v.item():.4g}" for name, v in per_task.items())
                raise DivergenceError(f"loss became {loss_value} at step {it} (lr {step_lr:.3g}; {detail})")
            tape.backward(total)
        optimizer.step(step_lr)
        result.losses.append(loss_value)

        if (it + 1) % eval_interval == 0 or it + 1 == steps:
            result.evaluation = evaluate(model, eval_scenes, batch_size, step=it + 1)
            logger.info(f"step {it + 1}/{steps} loss {loss_value:.4f} lr {step_lr:.3g} "
                        f"eval loss {result.evaluation.loss:.4f}")
            if metrics_path is not None:
                _append_records(metrics_path, result.evaluation.report, it + 1)

    if out_path is not None:
        result.checkpoint_path = save_model(model, out_path)
    return result


def _append_records(path: Path, report: MetricReport, step: int) -> None:
    with path.open("a") as handle:
        for entry in report.entries:
            record = MetricRecord(step=step, task=entry.name, metric=entry.metric, value=entry.value)
            handle.write(record.model_dump_json() + "\n")


def train_single_task_baselines(config: ModelConfig, scenes: Sequence[SyntheticScene], steps: int,
                                eval_scenes: Optional[Sequence[SyntheticScene]] = None,
                                **train_kwargs) -> MetricReport:
    """
    One single-task model per task with the identical step budget

    Each baseline keeps the decoder topology without a cross-task block.

    Returns:
        MetricReport in the task order of `config`
    """
    entries = []
    for task in config.tasks:
        single = config.model_copy(update={"tasks": [task], "ctm_variant": "none"})
        logger.info(f"Single-task baseline: {task.name}")
        result = train(single, scenes, steps, eval_scenes=eval_scenes, **train_kwargs)
        entries.extend(result.evaluation.report.entries)
    return MetricReport(entries=entries)


def read_metric_log(path: Union[str, Path]) -> List[MetricRecord]:
    return [MetricRecord.model_validate_json(line) for line in Path(path).read_text().splitlines() if line.strip()]
