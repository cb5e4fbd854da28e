"""
Multi-Task Network
Toy four-scale encoder, three-stage decoder and per-task heads
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from mtscan import tensor as T
from mtscan.blocks import ECR, STM, TaskFeatureSet, make_ctm, make_head
from mtscan.config import Config
from mtscan.counter import counting
from mtscan.errors import ShapeError
from mtscan.models import ModelConfig
from mtscan.nn import Conv2d, LayerNorm, Linear, Module, ModuleList
from mtscan.tensor import Tensor
from mtscan.utils import make_rng, resolve_dtype

logger = logging.getLogger(Config.LOGGER_NAME)

ENCODER_STRIDE = 32
STEM_PATCH = 4


# ============================================================================
# Encoder
# ============================================================================

class EncoderUnit(Module):
    """conv3x3 (stride 1 or 2) -> LN -> SiLU"""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float64, stride: int = 1):
        super().__init__()
        self.conv = Conv2d(cin, cout, rng, dtype, kind="3x3", stride=stride)
        self.norm = LayerNorm(cout, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.silu(self.norm(self.conv(x)))


class ToyEncoder(Module):
    """
    Small convolutional pyramid with a hierarchical four-scale output

    Stem: 4x4 patches (rearrange_reduce + linear, i.e. a stride-4 conv) + LN.
    Then three stages, each a stride-2 unit followed by a stride-1 unit.
    Outputs C, 2C, 4C, 8C channels at H/4, H/8, H/16, H/32.
    """

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.channels = channels
        self.stem = Linear(3 * STEM_PATCH * STEM_PATCH, channels, rng, dtype)
        self.stem_norm = LayerNorm(channels, dtype)
        stages = []
        for s in range(3):
            cin, cout = channels * 2 ** s, channels * 2 ** (s + 1)
            stages.append(ModuleList([EncoderUnit(cin, cout, rng, dtype, stride=2),
                                      EncoderUnit(cout, cout, rng, dtype)]))
        self.stages = ModuleList(stages)

    def forward(self, img: Tensor) -> List[Tensor]:
        if img.ndim != 4 or img.shape[-1] != 3:
            raise ShapeError(f"encoder expects (B,H,W,3), got {img.shape}")
        _, height, width, _ = img.shape
        if height % ENCODER_STRIDE or width % ENCODER_STRIDE:
            raise ShapeError(f"image extents {(height, width)} must be divisible by {ENCODER_STRIDE}")
        x = self.stem_norm(self.stem(T.rearrange_reduce(img, STEM_PATCH)))
        features = [x]
        for stage in self.stages:
            for unit in stage:
                x = unit(x)
            features.append(x)
        return features


# ============================================================================
# Decoder
# ============================================================================

class DecoderStage(Module):
    """Per-task ECR and two STM blocks, then one cross-task block"""

    def __init__(self, cin: int, config: ModelConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        tasks = len(config.tasks)
        cfg = config.block_config(cin // 2)
        self.ecrs = ModuleList([ECR(cin, rng, dtype) for _ in range(tasks)])
        self.stms = ModuleList([ModuleList([STM(cfg, rng, dtype), STM(cfg, rng, dtype)]) for _ in range(tasks)])
        self.ctm = make_ctm(cfg, rng, dtype)

    def forward(self, xs: Sequence[Tensor], skip: Tensor) -> TaskFeatureSet:
        feats = []
        for ecr, stms, x in zip(self.ecrs, self.stms, xs):
            y = ecr(x, skip)
            for stm in stms:
                y = stm(y)
            feats.append(y)
        if self.ctm is not None:
            feats = self.ctm(feats)
        return feats


class Decoder(Module):
    """
    Three-stage decoder (or its first `stages_enabled` stages)

    Stage s consumes 8C/2^(s-1) channels and emits half, using skips E3, E2,
    E1. Truncated decoders reach H/4 by parameter-free bilinear upsampling.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.tasks = len(config.tasks)
        self.stages_enabled = config.stages_enabled
        self.stages = ModuleList([DecoderStage(8 * config.C // 2 ** s, config, rng, dtype)
                                  for s in range(config.stages_enabled)])
        self.out_channels = 8 * config.C // 2 ** config.stages_enabled

    def forward(self, encoded: Sequence[Tensor], task_inputs: Optional[Sequence[Tensor]] = None) -> TaskFeatureSet:
        """
        Args:
            encoded: [E1, E2, E3, E4]
            task_inputs: Per-task stage-1 inputs (every task is seeded from E4 if None)

        Returns:
            Per-task features at H/4
        """
        if len(encoded) != 4:
            raise ShapeError(f"decoder needs four encoder scales, got {len(encoded)}")
        feats = list(task_inputs) if task_inputs is not None else [encoded[3]] * self.tasks
        if len(feats) != self.tasks:
            raise ShapeError(f"decoder was built for {self.tasks} tasks, got {len(feats)} inputs")
        skips = [encoded[2], encoded[1], encoded[0]]
        for stage, skip in zip(self.stages, skips):
            feats = stage(feats, skip)
        scale = 2 ** (3 - self.stages_enabled)
        if scale > 1:
            feats = [T.interpolate_bilinear(f, scale) for f in feats]
        return feats


# ============================================================================
# Full model
# ============================================================================

class MultiTaskModel(Module):
    """Encoder + decoder + one head per task; heads emit channel-first maps"""

    def __init__(self, config: ModelConfig, dtype=None):
        super().__init__()
        self.config = config
        dtype = resolve_dtype(config.dtype) if dtype is None else np.dtype(dtype)
        self.encoder = ToyEncoder(config.C, make_rng(config.seed, 0), dtype)
        self.decoder = Decoder(config, make_rng(config.seed, 1), dtype)
        head_rng = make_rng(config.seed, 2)
        self.heads = ModuleList([make_head(config.head, self.decoder.out_channels, task.out_dim, head_rng, dtype)
                                 for task in config.tasks])
        self.task_names = [task.name for task in config.tasks]
        self.dtype = dtype

    def task_features(self, img: Tensor) -> TaskFeatureSet:
        return self.decoder(self.encoder(img))

    def forward(self, img: Tensor) -> Dict[str, Tensor]:
        """
        Args:
            img: Tensor[B, H, W, 3] with H, W divisible by 32

        Returns:
            Task name -> prediction Tensor[B, out_dim, H, W]
        """
        feats = self.task_features(img)
        return {name: T.transpose(head(f), (0, 3, 1, 2))
                for name, head, f in zip(self.task_names, self.heads, feats)}


def count_params_flops(config: ModelConfig, height: int = Config.IMAGE_SIZE,
                       width: int = Config.IMAGE_SIZE) -> Dict[str, object]:
    """
    Parameter count and analytic forward FLOPs for one image

    Returns:
        {"params": int, "flops": int, "flops_by_kind": {kind: int}}
    """
    model = MultiTaskModel(config).eval()
    img = Tensor(np.zeros((1, height, width, 3), dtype=model.dtype))
    with counting() as counter:
        model(img)
    result = {"params": model.num_parameters(), "flops": counter.total,
              "flops_by_kind": dict(sorted(counter.by_kind.items()))}
    logger.debug(f"count {config.mixer}/{config.ctm_variant}: {result['params']} params, {result['flops']} flops")
    return result
