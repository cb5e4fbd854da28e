"""
Tensor Core Module - dense arrays with tape-based reverse-mode autodiff

Every op is a pure function of its inputs. When any input is attached to an
active Tape the op appends a node (op kind, input node ids, backward closure)
to that tape; Tape.backward walks the nodes in strict reverse append order.

Layout is channel-last (B, H, W, C) throughout.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from mtscan.config import Config
from mtscan.counter import charge
from mtscan.errors import NonFiniteError, ShapeError

logger = logging.getLogger(Config.LOGGER_NAME)

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# NaN/Inf check after every op; mirrors Config.DEBUG, switchable at runtime
_check_finite = Config.DEBUG

Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
Operand = Union["Tensor", float, int]


def set_debug(enabled: bool) -> None:
    """Toggle the NaN/Inf check performed after every op"""
    global _check_finite
    _check_finite = bool(enabled)


class _Node:
    """One tape entry: either a watched leaf or an op with its backward rule"""

    __slots__ = ("op", "inputs", "backward", "leaf")

    def __init__(self, op: str, inputs: Tuple[Optional[int], ...],
                 backward: Optional[Backward], leaf: Optional["Tensor"] = None):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.leaf = leaf


class Tape:
    """
    Append-only record of the ops applied to watched tensors

    Usage:
        tape = Tape()
        for p in model.parameters():
            tape.watch(p)
        loss = model_loss(...)
        tape.backward(loss)   # fills p.grad for every watched leaf
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self.active = True

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, *exc) -> None:
        self.active = False

    def watch(self, tensor: "Tensor") -> "Tensor":
        """
        Register a leaf so ops consuming it are recorded

        Args:
            tensor: Leaf tensor (parameter or input)

        Returns:
            The same tensor, now attached to this tape
        """
        if not self.active:
            raise RuntimeError("cannot watch on a tape that has already been consumed")
        tensor.tape = self
        tensor.grad_node = len(self.nodes)
        tensor.grad = None
        self.nodes.append(_Node("leaf", (), None, leaf=tensor))
        return tensor

    def record(self, op: str, inputs: Sequence["Tensor"], backward: Backward) -> int:
        """Append an op node and return its id"""
        ids = tuple(t.grad_node if t.tape is self else None for t in inputs)
        self.nodes.append(_Node(op, ids, backward))
        return len(self.nodes) - 1

    def backward(self, loss: "Tensor") -> Dict[int, np.ndarray]:
        """
        Reverse pass from a scalar loss

        Args:
            loss: Scalar tensor recorded on this tape

        Returns:
            Mapping leaf node id -> gradient; each watched leaf's .grad is also set

        Raises:
            ShapeError: loss is not a scalar
            RuntimeError: loss was not recorded on this tape, or the tape was already consumed
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.grad_node is None:
            raise RuntimeError("loss was not recorded on this tape")
        if not self.active:
            raise RuntimeError("tape already consumed; record a fresh tape per pass")
        self.active = False

        grads: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[loss.grad_node] = np.ones_like(loss.data)
        leaf_grads: Dict[int, np.ndarray] = {}

        for node_id in range(loss.grad_node, -1, -1):
            grad = grads[node_id]
            if grad is None:
                continue
            node = self.nodes[node_id]
            if node.leaf is not None:
                node.leaf.grad = grad
                leaf_grads[node_id] = grad
                continue
            input_grads = node.backward(grad)
            for input_id, input_grad in zip(node.inputs, input_grads):
                if input_id is None or input_grad is None:
                    continue
                if grads[input_id] is None:
                    grads[input_id] = input_grad
                else:
                    grads[input_id] = grads[input_id] + input_grad
            grads[node_id] = None

        # Leaves that received no contribution get zeros
        for node in self.nodes:
            if node.leaf is not None and node.leaf.grad is None:
                node.leaf.grad = np.zeros_like(node.leaf.data)
        return leaf_grads


class Tensor:
    """
    Dense row-major float array (f32 or f64) with an optional tape node

    Attributes:
        data: Contiguous numpy array
        tape: Tape this tensor is recorded on (None for constants)
        grad_node: Node id inside `tape`
        grad: Gradient filled by Tape.backward for watched leaves
        name: Optional parameter name
    """

    def __init__(self, data, dtype=None, name: Optional[str] = None):
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif array.dtype not in _FLOAT_DTYPES:
            array = array.astype(np.float64)
        self.data = np.ascontiguousarray(array)
        self.tape: Optional[Tape] = None
        self.grad_node: Optional[int] = None
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # Operators
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: float) -> "Tensor":
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


# ============================================================================
# Op plumbing
# ============================================================================

def _active_tape(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.tape is not None and t.tape.active:
            if tape is not None and t.tape is not tape:
                raise RuntimeError("inputs are recorded on two different tapes")
            tape = t.tape
    return tape


def apply_op(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    """
    Wrap an op result and record it on the inputs' tape (if any)

    Args:
        op: Op kind label stored on the tape
        out: Forward result
        inputs: Tensors the result depends on
        backward: Maps dL/dout to one gradient (or None) per input

    Returns:
        Result tensor
    """
    if _check_finite and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"op {op} produced non-finite values")
    result = Tensor(out)
    tape = _active_tape(inputs)
    if tape is not None:
        result.tape = tape
        result.grad_node = tape.record(op, inputs, backward)
    return result


def as_tensor(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    """Promote a Python scalar to a constant tensor matching `like`'s dtype"""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> Tuple[int, ...]:
    """Equal rank with extent 1 on every mismatched axis; a 0-d operand combines with any shape"""
    if a.ndim and b.ndim:
        if a.ndim != b.ndim or any(x != y and 1 not in (x, y) for x, y in zip(a.shape, b.shape)):
            raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible")
    return np.broadcast_shapes(a.shape, b.shape)


# ============================================================================
# Elementwise ops
# ============================================================================

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return apply_op("add", a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return apply_op("sub", a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return apply_op("mul", ad * bd, (a, b),
                    lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return apply_op("log", np.log(ad), (a,), lambda g: (g / ad,))


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return apply_op("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return apply_op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    sig = _sigmoid(ad)
    return apply_op("silu", ad * sig, (a,), lambda g: (g * sig * (1.0 + ad * (1.0 - sig)),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = (ad > 0).astype(ad.dtype)
    return apply_op("relu", ad * mask, (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x); identity branch above Config.SOFTPLUS_THRESHOLD"""
    ad = a.data
    big = ad > Config.SOFTPLUS_THRESHOLD
    out = np.where(big, ad, np.log1p(np.exp(np.minimum(ad, Config.SOFTPLUS_THRESHOLD))))
    slope = np.where(big, 1.0, _sigmoid(ad)).astype(ad.dtype)
    return apply_op("softplus", out, (a,), lambda g: (g * slope,))


_UNARY = {"silu": silu, "sigmoid": sigmoid, "relu": relu, "softplus": softplus, "exp": exp, "neg": neg}
_BINARY = {"add": add, "mul": mul}


def elementwise(kind: str, a: Tensor, b: Optional[Operand] = None) -> Tensor:
    """
    Dispatch one of the elementwise kinds by name

    Args:
        kind: add, mul, silu, sigmoid, relu, softplus, exp or neg
        a: First operand
        b: Second operand (binary kinds only)

    Returns:
        Elementwise result

    Raises:
        ShapeError: operands are not broadcast-compatible
    """
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def _pair(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ============================================================================
# Reductions and shape ops
# ============================================================================

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op("sum", np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    return apply_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return apply_op("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                    lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing"""
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return apply_op("getitem", np.ascontiguousarray(a.data[index]), (a,), backward)


def take(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis; repeated indices accumulate in the gradient"""
    shape, dtype = a.shape, a.dtype
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return apply_op("take", np.take(a.data, indices, axis=axis), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        rest_a = tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]
        rest_b = t.shape[:axis] + t.shape[axis + 1:]
        if t.ndim != ndim or rest_a != rest_b:
            raise ShapeError(f"cannot concat shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return apply_op("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"cannot stack shapes {tensors[0].shape} and {t.shape}")
    out = np.stack([t.data for t in tensors], axis=axis)
    count = len(tensors)
    return apply_op("stack", out, tensors,
                    lambda g: tuple(np.take(g, i, axis=axis) for i in range(count)))


# ============================================================================
# Linear algebra
# ============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the last two axes with numpy batch broadcasting"""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape} do not align")
    ad, bd = a.data, b.data
    out = ad @ bd
    charge("matmul", 2 * out.size * ad.shape[-1])

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return apply_op("matmul", out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    y[..., j] = sum_i x[..., i] * W[i, j] (+ bias[j])

    Args:
        x: Tensor[..., Cin]
        weight: Tensor[Cin, Cout]
        bias: Optional Tensor[Cout]

    Returns:
        Tensor[..., Cout]

    Raises:
        ShapeError: last axis of x differs from Cin
    """
    cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"linear expects last axis {cin}, got input shape {x.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"linear bias must have shape ({cout},), got {bias.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    charge("linear", 2 * (xd.size // cin) * cin * cout)
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = g @ wd.T
        gw = xd.reshape(-1, cin).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return apply_op("linear", out, inputs, backward)


# ============================================================================
# Convolution
# ============================================================================

def _conv_windows(padded: np.ndarray, k: int, stride: int, h_out: int, w_out: int):
    """Yield (i, j, window) for each kernel tap over a zero-padded input"""
    for i in range(k):
        for j in range(k):
            rows = slice(i, i + stride * (h_out - 1) + 1, stride)
            cols = slice(j, j + stride * (w_out - 1) + 1, stride)
            yield i, j, (slice(None), rows, cols, slice(None))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           kind: str = "3x3", stride: int = 1) -> Tensor:
    """
    Channel-last cross-correlation with zero padding (k // 2)

    Args:
        x: Tensor[B, H, W, Cin]
        weight: [Cin, Cout] for "1x1", [3, 3, Cin, Cout] for "3x3",
            [3, 3, C] for "3x3-depthwise"
        bias: Optional Tensor[Cout]
        kind: "1x1", "3x3" or "3x3-depthwise"
        stride: 1 preserves spatial extents; 2 halves them

    Returns:
        Tensor[B, H', W', Cout]

    Raises:
        ShapeError: channel mismatch or malformed kernel
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (B,H,W,C), got {x.shape}")
    if kind == "1x1":
        if stride != 1:
            x = x[:, ::stride, ::stride, :]
        return linear(x, weight, bias)

    depthwise = kind == "3x3-depthwise"
    if kind not in ("3x3", "3x3-depthwise"):
        raise ValueError(f"unknown conv kind {kind!r}")
    batch, height, width, cin = x.shape
    if depthwise:
        if weight.shape != (3, 3, cin):
            raise ShapeError(f"depthwise kernel must be (3,3,{cin}), got {weight.shape}")
        cout = cin
    else:
        if weight.ndim != 4 or weight.shape[:3] != (3, 3, cin):
            raise ShapeError(f"3x3 kernel must be (3,3,{cin},Cout), got {weight.shape}")
        cout = weight.shape[3]
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv bias must have shape ({cout},), got {bias.shape}")

    k, pad = 3, 1
    h_out = (height + 2 * pad - k) // stride + 1
    w_out = (width + 2 * pad - k) // stride + 1
    xd, wd = x.data, weight.data
    padded = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.zeros((batch, h_out, w_out, cout), dtype=np.result_type(xd, wd))
    for i, j, window in _conv_windows(padded, k, stride, h_out, w_out):
        patch = padded[window]
        out += patch * wd[i, j] if depthwise else patch @ wd[i, j]
    charge(f"conv2d-{kind}", 2 * 9 * batch * h_out * w_out * (cin if depthwise else cin * cout))
    if bias is not None:
        out += bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g_padded = np.zeros_like(padded)
        g_weight = np.zeros_like(wd)
        for i, j, window in _conv_windows(padded, k, stride, h_out, w_out):
            patch = padded[window]
            if depthwise:
                g_weight[i, j] = (patch * g).sum(axis=(0, 1, 2))
                g_padded[window] += g * wd[i, j]
            else:
                g_weight[i, j] = patch.reshape(-1, cin).T @ g.reshape(-1, cout)
                g_padded[window] += g @ wd[i, j].T
        g_x = g_padded[:, pad:pad + height, pad:pad + width, :]
        if bias is None:
            return g_x, g_weight
        return g_x, g_weight, g.sum(axis=(0, 1, 2))

    return apply_op(f"conv2d-{kind}", out, inputs, backward)


# ============================================================================
# Normalization
# ============================================================================

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = Config.LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis per position"""
    features = x.shape[-1]
    if gamma.shape != (features,) or beta.shape != (features,):
        raise ShapeError(f"layernorm params must have shape ({features},)")
    xd, gd = x.data, gamma.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    out = xhat * gd + beta.data

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        g_hat = g * gd
        g_x = rstd * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                      - xhat * (g_hat * xhat).mean(axis=-1, keepdims=True))
        return g_x, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return apply_op("layernorm", out, (x, gamma, beta), backward)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray, training: bool,
                 momentum: float = Config.BATCHNORM_MOMENTUM,
                 eps: float = Config.BATCHNORM_EPS) -> Tensor:
    """
    Per-channel normalization over (B, H, W)

    In training mode batch statistics are used and the running buffers are
    updated in place with `momentum` (unbiased variance, as the reference
    frameworks do); in eval mode the running buffers are used.
    """
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batchnorm params must have shape ({channels},)")
    xd, gd = x.data, gamma.data
    axes = (0, 1, 2)

    if not training:
        rstd = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean) * rstd
        return apply_op("batchnorm-eval", xhat * gd + beta.data, (x, gamma, beta),
                        lambda g: (g * gd * rstd, (g * xhat).sum(axis=axes), g.sum(axis=axes)))

    count = xd.shape[0] * xd.shape[1] * xd.shape[2]
    mu = xd.mean(axis=axes)
    centered = xd - mu
    var = (centered * centered).mean(axis=axes)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    unbiased = var * count / max(count - 1, 1)
    running_mean *= (1.0 - momentum)
    running_mean += momentum * mu
    running_var *= (1.0 - momentum)
    running_var += momentum * unbiased

    def backward(g):
        g_hat = g * gd
        g_x = rstd * (g_hat - g_hat.mean(axis=axes) - xhat * (g_hat * xhat).mean(axis=axes))
        return g_x, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return apply_op("batchnorm", xhat * gd + beta.data, (x, gamma, beta), backward)


# ============================================================================
# Softmax family
# ============================================================================

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)
    return apply_op("softmax", out, (x,),
                    lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return apply_op("log_softmax", out, (x,),
                    lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


# ============================================================================
# Resampling
# ============================================================================

def bilinear_matrix(size: int, scale: int, dtype=np.float64) -> np.ndarray:
    """
    Interpolation weights [size*scale, size] for align-corners=false

    Output index i samples source position (i + 0.5) / scale - 0.5, clamped
    at the lower edge; the upper neighbour is clamped to size - 1.
    """
    out_size = size * scale
    matrix = np.zeros((out_size, size), dtype=dtype)
    for i in range(out_size):
        src = max((i + 0.5) / scale - 0.5, 0.0)
        lo = min(int(np.floor(src)), size - 1)
        hi = min(lo + 1, size - 1)
        frac = src - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    return matrix


def _apply_along(matrix: np.ndarray, data: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(matrix, data, axes=([1], [axis])), 0, axis)


def interpolate_bilinear(x: Tensor, scale: int) -> Tensor:
    """
    Bilinear upsampling of a (B, H, W, C) map by an integer factor

    Raises:
        ValueError: scale < 1
    """
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    if scale == 1:
        return x
    _, height, width, _ = x.shape
    rows = bilinear_matrix(height, scale, x.dtype)
    cols = bilinear_matrix(width, scale, x.dtype)
    out = _apply_along(cols, _apply_along(rows, x.data, 1), 2)
    return apply_op("bilinear", np.ascontiguousarray(out), (x,),
                    lambda g: (np.ascontiguousarray(_apply_along(rows.T, _apply_along(cols.T, g, 2), 1)),))


def rearrange_expand(x: Tensor, r: int) -> Tensor:
    """
    (B, H, W, C*r*r) -> (B, rH, rW, C)

    Channel group g = i*r + j (each of size C) lands at spatial offset (i, j)
    of the r x r block, so channels [a, b, c, d] with C=1, r=2 become
    [[a, b], [c, d]].
    """
    batch, height, width, channels = x.shape
    if channels % (r * r):
        raise ShapeError(f"channel extent {channels} is not divisible by r^2={r * r}")
    c = channels // (r * r)
    blocks = reshape(x, (batch, height, width, r, r, c))
    return reshape(transpose(blocks, (0, 1, 3, 2, 4, 5)), (batch, height * r, width * r, c))


def rearrange_reduce(x: Tensor, r: int) -> Tensor:
    """Exact inverse of rearrange_expand: (B, rH, rW, C) -> (B, H, W, C*r*r)"""
    batch, height, width, channels = x.shape
    if height % r or width % r:
        raise ShapeError(f"spatial extents {(height, width)} are not divisible by r={r}")
    blocks = reshape(x, (batch, height // r, r, width // r, r, channels))
    return reshape(transpose(blocks, (0, 1, 3, 2, 4, 5)),
                   (batch, height // r, width // r, r * r * channels))
