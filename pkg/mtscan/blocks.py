"""
Decoder Blocks
ECR, STM, F-CTM, S-CTM and the two prediction heads

All blocks are channel-last. STM and both CTM variants are pre-norm
residual blocks whose output projections start at zero, so a freshly
built block is the identity on its input.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from mtscan import tensor as T
from mtscan.attention import WindowAttention
from mtscan.config import Config
from mtscan.errors import ShapeError
from mtscan.models import BlockConfig
from mtscan.nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module, ModuleList
from mtscan.scan2d import ScanDirection, Ss2dParams, css2d, ss2d
from mtscan.tensor import Tensor

logger = logging.getLogger(Config.LOGGER_NAME)

TaskFeatureSet = List[Tensor]


# ============================================================================
# Token mixers
# ============================================================================

class ScanMixer(Module):
    """SS2D when called with one map, CSS2D when a shared map is given"""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.params = Ss2dParams(cfg.inner, cfg.N, rng, dtype, tie_directions=cfg.tie_directions)
        self.active = ScanDirection.parse(cfg.scan_directions)

    def forward(self, query: Tensor, shared: Optional[Tensor] = None) -> Tensor:
        if shared is None:
            return ss2d(self.params, query, self.active)
        return css2d(self.params, query, shared, self.active)


def make_mixer(cfg: BlockConfig, rng: np.random.Generator, dtype=np.float64) -> Module:
    """Scan mixer, or windowed attention for the attention-swap variant"""
    if cfg.mixer == "attention":
        return WindowAttention(cfg.inner, rng, dtype, window=cfg.window, heads=cfg.heads)
    return ScanMixer(cfg, rng, dtype)


def _check_tasks(xs: Sequence[Tensor], expected: int) -> None:
    if len(xs) != expected:
        raise ShapeError(f"block was built for {expected} tasks, got {len(xs)} feature maps")
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeError(f"task features disagree: {xs[0].shape} vs {x.shape}")


# ============================================================================
# ECR
# ============================================================================

class ECR(Module):
    """
    Expand, concatenate, reduce

    linear Cin -> 2Cin, rearrange to (2H, 2W, Cin/2), concat with the encoder
    skip (Cin/2 channels), 1x1 conv back to Cin/2.
    """

    def __init__(self, cin: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if cin % 2:
            raise ShapeError(f"ECR needs an even channel count, got {cin}")
        self.cin = cin
        self.expand = Linear(cin, 2 * cin, rng, dtype)
        self.reduce = Conv2d(cin, cin // 2, rng, dtype, kind="1x1")

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        batch, height, width, channels = x.shape
        expected = (batch, 2 * height, 2 * width, channels // 2)
        if channels != self.cin or skip.shape != expected:
            raise ShapeError(f"ECR got x {x.shape} and skip {skip.shape}; skip must be {expected}")
        up = T.rearrange_expand(self.expand(x), 2)
        return self.reduce(T.concat([up, skip], axis=-1))


# ============================================================================
# STM
# ============================================================================

class STM(Module):
    """
    Self-task block

        a    = LN(x)
        main = SiLU(dwconv3x3(linear(a, C -> aC)))
        y    = SS2D(main)
        out  = x + linear(LN(y) * SiLU(linear(a, C -> aC)), aC -> C)
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.norm = LayerNorm(cfg.C, dtype)
        self.in_proj = Linear(cfg.C, cfg.inner, rng, dtype)
        self.local = Conv2d(cfg.inner, cfg.inner, rng, dtype, kind="3x3-depthwise")
        self.mixer = make_mixer(cfg, rng, dtype)
        self.out_norm = LayerNorm(cfg.inner, dtype)
        self.gate = Linear(cfg.C, cfg.inner, rng, dtype)
        self.out_proj = Linear(cfg.inner, cfg.C, rng, dtype, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        a = self.norm(x)
        main = T.silu(self.local(self.in_proj(a)))
        y = self.mixer(main)
        gate = T.silu(self.gate(a))
        return x + self.out_proj(self.out_norm(y) * gate)


# ============================================================================
# Cross-task blocks
# ============================================================================

class FCTM(Module):
    """
    Cross-task block fusing through a gated convex combination

        a_t  = LN_t(x_t)
        z_sh = SS2D(SiLU(dwconv(linear(concat(a_1..a_T), TC -> aC))))
        z_t  = SS2D(SiLU(dwconv(linear(a_t, C -> aC))))
        g_t  = sigmoid(linear(a_t, C -> aC))
        out_t = x_t + linear(g_t * z_t + (1 - g_t) * z_sh, aC -> C)
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.tasks = cfg.T
        self.norms = ModuleList([LayerNorm(cfg.C, dtype) for _ in range(cfg.T)])
        self.fuse = Linear(cfg.T * cfg.C, cfg.inner, rng, dtype)
        self.shared_local = Conv2d(cfg.inner, cfg.inner, rng, dtype, kind="3x3-depthwise")
        self.shared_mixer = make_mixer(cfg, rng, dtype)
        self.in_projs = ModuleList([Linear(cfg.C, cfg.inner, rng, dtype) for _ in range(cfg.T)])
        self.locals = ModuleList([Conv2d(cfg.inner, cfg.inner, rng, dtype, kind="3x3-depthwise")
                                  for _ in range(cfg.T)])
        self.mixers = ModuleList([make_mixer(cfg, rng, dtype) for _ in range(cfg.T)])
        self.gates = ModuleList([Linear(cfg.C, cfg.inner, rng, dtype) for _ in range(cfg.T)])
        self.out_projs = ModuleList([Linear(cfg.inner, cfg.C, rng, dtype, zero_init=True)
                                     for _ in range(cfg.T)])

    def branches(self, xs: Sequence[Tensor]) -> Tuple[Tensor, TaskFeatureSet, TaskFeatureSet]:
        """Returns (z_sh, [z_t], [g_t]) before aggregation"""
        _check_tasks(xs, self.tasks)
        normed = [norm(x) for norm, x in zip(self.norms, xs)]
        fused = self.fuse(normed[0] if self.tasks == 1 else T.concat(normed, axis=-1))
        z_shared = self.shared_mixer(T.silu(self.shared_local(fused)))
        z_tasks, gates = [], []
        for t, a in enumerate(normed):
            z_tasks.append(self.mixers[t](T.silu(self.locals[t](self.in_projs[t](a)))))
            gates.append(T.sigmoid(self.gates[t](a)))
        return z_shared, z_tasks, gates

    def forward(self, xs: Sequence[Tensor]) -> TaskFeatureSet:
        z_shared, z_tasks, gates = self.branches(xs)
        outputs = []
        for t, (x, z, g) in enumerate(zip(xs, z_tasks, gates)):
            mixed = g * z + (1.0 - g) * z_shared
            outputs.append(x + self.out_projs[t](mixed))
        return outputs


class SCTM(Module):
    """
    Cross-task block fusing through the cross scan

        a_t    = LN_t(x_t)
        shared = conv3x3(SiLU(conv3x3(concat(a_1..a_T), TC -> aC)), aC -> aC)
        main_t = SiLU(dwconv(linear(a_t, C -> aC)))
        y_t    = CSS2D(main_t, shared)
        out_t  = x_t + linear(LN(y_t) * SiLU(linear(a_t, C -> aC)), aC -> C)
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.tasks = cfg.T
        self.norms = ModuleList([LayerNorm(cfg.C, dtype) for _ in range(cfg.T)])
        self.fuse_in = Conv2d(cfg.T * cfg.C, cfg.inner, rng, dtype, kind="3x3")
        self.fuse_out = Conv2d(cfg.inner, cfg.inner, rng, dtype, kind="3x3")
        self.in_projs = ModuleList([Linear(cfg.C, cfg.inner, rng, dtype) for _ in range(cfg.T)])
        self.locals = ModuleList([Conv2d(cfg.inner, cfg.inner, rng, dtype, kind="3x3-depthwise")
                                  for _ in range(cfg.T)])
        self.mixers = ModuleList([make_mixer(cfg, rng, dtype) for _ in range(cfg.T)])
        self.out_norms = ModuleList([LayerNorm(cfg.inner, dtype) for _ in range(cfg.T)])
        self.gates = ModuleList([Linear(cfg.C, cfg.inner, rng, dtype) for _ in range(cfg.T)])
        self.out_projs = ModuleList([Linear(cfg.inner, cfg.C, rng, dtype, zero_init=True)
                                     for _ in range(cfg.T)])

    def shared_feature(self, normed: Sequence[Tensor]) -> Tensor:
        stacked = normed[0] if self.tasks == 1 else T.concat(list(normed), axis=-1)
        return self.fuse_out(T.silu(self.fuse_in(stacked)))

    def forward(self, xs: Sequence[Tensor]) -> TaskFeatureSet:
        _check_tasks(xs, self.tasks)
        normed = [norm(x) for norm, x in zip(self.norms, xs)]
        shared = self.shared_feature(normed)
        outputs = []
        for t, (x, a) in enumerate(zip(xs, normed)):
            main = T.silu(self.locals[t](self.in_projs[t](a)))
            y = self.mixers[t](main, shared)
            gate = T.silu(self.gates[t](a))
            outputs.append(x + self.out_projs[t](self.out_norms[t](y) * gate))
        return outputs


def make_ctm(cfg: BlockConfig, rng: np.random.Generator, dtype=np.float64) -> Optional[Module]:
    if cfg.ctm_variant == "F":
        return FCTM(cfg, rng, dtype)
    if cfg.ctm_variant == "S":
        return SCTM(cfg, rng, dtype)
    return None


# ============================================================================
# Heads
# ============================================================================

class DenseHead(Module):
    """linear C -> 16C, rearrange x4, linear C -> out_dim"""

    def __init__(self, channels: int, out_dim: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.expand = Linear(channels, 16 * channels, rng, dtype)
        self.proj = Linear(channels, out_dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(T.rearrange_expand(self.expand(x), 4))


class LiteHead(Module):
    """conv3x3 -> batchnorm -> ReLU -> linear C -> out_dim -> bilinear x4"""

    def __init__(self, channels: int, out_dim: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(channels, channels, rng, dtype, kind="3x3")
        self.bn = BatchNorm2d(channels, dtype)
        self.proj = Linear(channels, out_dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.proj(T.relu(self.bn(self.conv(x))))
        return T.interpolate_bilinear(y, 4)


def make_head(kind: str, channels: int, out_dim: int, rng: np.random.Generator, dtype=np.float64) -> Module:
    if kind == "lite":
        return LiteHead(channels, out_dim, rng, dtype)
    return DenseHead(channels, out_dim, rng, dtype)
