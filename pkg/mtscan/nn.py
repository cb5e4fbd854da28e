"""
Layer Module
Module base class with named parameters, plus the layers the decoder uses
"""

from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from mtscan import tensor as T
from mtscan.config import Config
from mtscan.errors import CheckpointError
from mtscan.tensor import Tensor


class Parameter(Tensor):
    """Trainable leaf tensor"""


def kaiming_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, dtype) -> Parameter:
    """Uniform(-b, b) with b = sqrt(3 / fan_in) (unit gain)"""
    bound = np.sqrt(3.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype))


def zeros(shape: Sequence[int], dtype) -> Parameter:
    return Parameter(np.zeros(tuple(shape), dtype=dtype))


def ones(shape: Sequence[int], dtype) -> Parameter:
    return Parameter(np.ones(tuple(shape), dtype=dtype))


class Module:
    """
    Base class for everything holding parameters

    Parameters, buffers (numpy arrays registered through `register_buffer`)
    and child modules are discovered from instance attributes in assignment
    order, so names are deterministic for a given construction order.
    """

    def __init__(self):
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameter and buffer arrays keyed by dotted name"""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Copy arrays into parameters and buffers in place

        Raises:
            CheckpointError: missing names or shape mismatches
        """
        targets: Dict[str, np.ndarray] = {name: p.data for name, p in self.named_parameters()}
        targets.update({name: buf for name, buf in self.named_buffers()})
        missing = sorted(set(targets) - set(state))
        if missing:
            raise CheckpointError(f"checkpoint is missing {len(missing)} tensors, e.g. {missing[:3]}")
        for name, target in targets.items():
            source = np.asarray(state[name])
            if source.shape != target.shape:
                raise CheckpointError(f"{name}: checkpoint shape {source.shape} != model shape {target.shape}")
            target[...] = source


class ModuleList(Module):
    """Ordered container; children are named by index"""

    def __init__(self, modules: Sequence[Module] = ()):
        super().__init__()
        self._items: List[Module] = list(modules)

    def children(self) -> Iterator[Tuple[str, Module]]:
        for index, module in enumerate(self._items):
            yield str(index), module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def __getitem__(self, index: int) -> Module:
        return self._items[index]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)


class Linear(Module):
    """y = x W + b with W stored as [Cin, Cout]"""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float64,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.weight = zeros((cin, cout), dtype) if zero_init else kaiming_uniform(rng, (cin, cout), cin, dtype)
        self.bias = zeros((cout,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Channel-last conv: kind "1x1", "3x3" or "3x3-depthwise"; stride 1 or 2"""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float64,
                 kind: str = "3x3", stride: int = 1, bias: bool = True, zero_init: bool = False):
        super().__init__()
        if kind == "3x3-depthwise" and cin != cout:
            raise ValueError(f"depthwise conv needs cin == cout, got {cin} and {cout}")
        self.kind, self.stride = kind, stride
        self.cin, self.cout = cin, cout
        if kind == "1x1":
            shape, fan_in = (cin, cout), cin
        elif kind == "3x3":
            shape, fan_in = (3, 3, cin, cout), 9 * cin
        else:
            shape, fan_in = (3, 3, cin), 9
        self.weight = zeros(shape, dtype) if zero_init else kaiming_uniform(rng, shape, fan_in, dtype)
        self.bias = zeros((cout,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, kind=self.kind, stride=self.stride)


class LayerNorm(Module):
    """LayerNorm over the last axis"""

    def __init__(self, features: int, dtype=np.float64, eps: float = Config.LAYERNORM_EPS):
        super().__init__()
        self.eps = eps
        self.gamma = ones((features,), dtype)
        self.beta = zeros((features,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm2d(Module):
    """BatchNorm over (B, H, W) per channel with running statistics"""

    def __init__(self, channels: int, dtype=np.float64,
                 momentum: float = Config.BATCHNORM_MOMENTUM, eps: float = Config.BATCHNORM_EPS):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = ones((channels,), dtype)
        self.beta = zeros((channels,), dtype)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm2d(x, self.gamma, self.beta,
                              self._buffers["running_mean"], self._buffers["running_var"],
                              training=self.training, momentum=self.momentum, eps=self.eps)


def watch_all(tape: T.Tape, module: Module) -> List[Parameter]:
    """Attach every parameter of `module` to `tape`; returns them in name order"""
    params = module.parameters()
    for p in params:
        tape.watch(p)
    return params


def fill_zero_parameters(module: Module, rng: np.random.Generator, scale: float = 0.5) -> int:
    """
    Replace all-zero parameters (zero-init projections, biases, norm shifts)
    with Uniform(-scale, scale) values so every path carries gradient

    Returns:
        Number of parameters refilled
    """
    filled = 0
    for _, p in module.named_parameters():
        if not np.any(p.data):
            p.data[...] = rng.uniform(-scale, scale, size=p.shape)
            filled += 1
    return filled


def named_shapes(module: Module) -> Dict[str, Tuple[int, ...]]:
    """Parameter-tree shape map (used to compare model variants)"""
    return {name: p.shape for name, p in module.named_parameters()}
