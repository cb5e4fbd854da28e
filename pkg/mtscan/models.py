"""
Pydantic Models
Configuration schemas and the records written to metric logs, benchmark
CSVs and dataset indexes
"""

import math
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from mtscan.config import Config

DIRECTION_NAMES = ("D1", "D2", "D3", "D4")


# Task & Model Configuration

class TaskSpec(BaseModel):
    """One dense-prediction task"""
    model_config = ConfigDict(extra="forbid")

    name: str
    out_dim: int = Field(ge=1)
    loss: Literal["cross-entropy", "l1"]
    metric: Literal["miou", "rmse", "mean-angular-error", "boundary-f1"]
    higher_better: bool

    @model_validator(mode="after")
    def _compatible(self) -> "TaskSpec":
        expected = {
            "miou": ("cross-entropy", None, True),
            "boundary-f1": ("cross-entropy", 2, True),
            "rmse": ("l1", 1, False),
            "mean-angular-error": ("l1", 3, False),
        }[self.metric]
        loss, out_dim, higher = expected
        if self.loss != loss:
            raise ValueError(f"task {self.name}: metric {self.metric} needs loss {loss}")
        if out_dim is not None and self.out_dim != out_dim:
            raise ValueError(f"task {self.name}: metric {self.metric} needs out_dim {out_dim}")
        if self.metric == "miou" and self.out_dim < 2:
            raise ValueError(f"task {self.name}: miou needs at least 2 classes")
        if self.higher_better != higher:
            raise ValueError(f"task {self.name}: {self.metric} has higher_better={higher}")
        return self


def default_tasks(num_classes: int = Config.SEMSEG_CLASSES) -> List[TaskSpec]:
    """Semseg (K+1 classes), depth, normal, boundary"""
    return [
        TaskSpec(name="semseg", out_dim=num_classes + 1, loss="cross-entropy", metric="miou", higher_better=True),
        TaskSpec(name="depth", out_dim=1, loss="l1", metric="rmse", higher_better=False),
        TaskSpec(name="normal", out_dim=3, loss="l1", metric="mean-angular-error", higher_better=False),
        TaskSpec(name="boundary", out_dim=2, loss="cross-entropy", metric="boundary-f1", higher_better=True),
    ]


class BlockConfig(BaseModel):
    """Widths and variants shared by the blocks of one decoder stage"""
    model_config = ConfigDict(extra="forbid")

    C: int = Field(ge=1)
    alpha: int = Field(default=Config.EXPANSION_FACTOR, ge=1)
    N: int = Field(default=Config.STATE_SIZE, ge=1)
    T: int = Field(default=1, ge=1)
    ctm_variant: Literal["F", "S", "none"] = "S"
    head: Literal["dense", "lite"] = "dense"
    mixer: Literal["ssm", "attention"] = "ssm"
    scan_directions: List[str] = Field(default_factory=lambda: list(DIRECTION_NAMES))
    tie_directions: bool = False
    window: int = Field(default=Config.ATTENTION_WINDOW, ge=1)
    heads: int = Field(default=Config.ATTENTION_HEADS, ge=1)

    @property
    def inner(self) -> int:
        return self.alpha * self.C


class ModelConfig(BaseModel):
    """Full model configuration (serialized as JSON)"""
    model_config = ConfigDict(extra="forbid")

    C: int = Field(default=Config.BASE_CHANNELS, ge=1)
    N: int = Field(default=Config.STATE_SIZE, ge=1)
    alpha: int = Field(default=Config.EXPANSION_FACTOR, ge=1)
    stages_enabled: int = Field(default=3, ge=1, le=3)
    ctm_variant: Literal["F", "S", "none"] = "S"
    head: Literal["dense", "lite"] = "dense"
    mixer: Literal["ssm", "attention"] = "ssm"
    scan_directions: List[str] = Field(default_factory=lambda: list(DIRECTION_NAMES))
    tie_directions: bool = False
    window: int = Field(default=Config.ATTENTION_WINDOW, ge=1)
    heads: int = Field(default=Config.ATTENTION_HEADS, ge=1)
    K: int = Field(default=Config.SEMSEG_CLASSES, ge=1)
    tasks: List[TaskSpec] = Field(default_factory=default_tasks)
    seed: int = Config.SEED
    dtype: Literal["f32", "f64"] = "f32"

    @field_validator("scan_directions")
    @classmethod
    def _directions(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("scan_directions must name at least one direction")
        unknown = [d for d in value if d not in DIRECTION_NAMES]
        if unknown:
            raise ValueError(f"unknown scan directions {unknown}")
        return sorted(set(value))

    @model_validator(mode="after")
    def _consistent(self) -> "ModelConfig":
        if not self.tasks:
            raise ValueError("at least one task is required")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ValueError(f"task names must be unique, got {names}")
        if self.mixer == "attention" and (self.alpha * self.C) % self.heads:
            raise ValueError("alpha*C must be divisible by heads for the attention mixer")
        return self

    def block_config(self, channels: int) -> BlockConfig:
        return BlockConfig(
            C=channels, alpha=self.alpha, N=self.N, T=len(self.tasks),
            ctm_variant=self.ctm_variant, head=self.head, mixer=self.mixer,
            scan_directions=self.scan_directions, tie_directions=self.tie_directions,
            window=self.window, heads=self.heads,
        )


# Metric Records

class MetricEntry(BaseModel):
    """One task's evaluation result"""
    name: str
    metric: str
    value: float
    higher_better: bool

    @field_validator("value")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("metric values must be finite")
        return value


class MetricReport(BaseModel):
    """Per-task metric values plus direction flags (input to Δ_m)"""
    entries: List[MetricEntry]
    step: Optional[int] = None
    # "percent" for reports quoting mIoU/F1 in 0..100 (published tables)
    scale: Literal["fraction", "percent"] = "fraction"

    @model_validator(mode="after")
    def _ranges(self) -> "MetricReport":
        upper = 1.0 if self.scale == "fraction" else 100.0
        for entry in self.entries:
            if entry.metric in ("miou", "boundary-f1") and not 0.0 <= entry.value <= upper:
                raise ValueError(f"{entry.name}: {entry.metric} must lie in [0, {upper:g}], got {entry.value}")
        return self

    def value(self, name: str) -> float:
        for entry in self.entries:
            if entry.name == name:
                return entry.value
        raise KeyError(name)

    @property
    def task_names(self) -> List[str]:
        return [entry.name for entry in self.entries]


class MetricRecord(BaseModel):
    """JSON-lines metric log row"""
    model_config = ConfigDict(extra="forbid")

    step: int
    task: str
    metric: str
    value: float


# Verification & Benchmark Records

class BenchRow(BaseModel):
    """One scan-bench CSV row"""
    impl: Literal["seq", "chunked", "attention"]
    L: int
    mean_ns: float
    stddev: float


class GradcheckEntry(BaseModel):
    """Max relative error of one parameter in a finite-difference suite"""
    suite: str
    parameter: str
    max_rel_err: float
    passed: bool
    # Entries compared out of the leaf size
    checked: int
    size: int


class OracleEntry(BaseModel):
    """Max abs difference of one kernel-vs-reference comparison"""
    suite: str
    case: str
    max_abs_diff: float
    tol: float
    passed: bool


class DatasetIndex(BaseModel):
    """index.json of a cached synthetic dataset"""
    seed: int
    H: int
    W: int
    K: int
    count: int
    files: List[str]


class AblationRecord(BaseModel):
    """One variant of an ablation sweep (JSON-lines row)"""
    ablation: str
    variant: str
    seed: int
    overrides: dict
    tasks: List[str]
    steps: int
    # Last training-batch loss and summed task loss over the eval scenes
    final_loss: float
    eval_loss: float
    delta_m: float
    # "stl" for single-task baselines, otherwise the variant label compared against
    baseline: str = "stl"
    report: MetricReport
