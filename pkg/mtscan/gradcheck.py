"""
Gradient Checks
Central finite differences against the tape's analytic gradients

Every check reduces the op/block output to loss = sum(out * R) with a
fixed random R, so every output element contributes. Per leaf tensor, up
to `max_entries` entries (all of them when None) are compared and the worst
|g_analytic - g_fd| / max(1, |g_fd|) is reported. All suites run in f64.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from mtscan import tensor as T
from mtscan.attention import WindowAttention
from mtscan.blocks import ECR, FCTM, SCTM, STM, DenseHead, LiteHead
from mtscan.config import Config
from mtscan.models import BlockConfig, GradcheckEntry, ModelConfig, default_tasks
from mtscan.network import MultiTaskModel, ToyEncoder
from mtscan.nn import Conv2d, Module, Parameter, fill_zero_parameters
from mtscan.scan2d import Ss2dParams, css2d
from mtscan.ssm import SsmParams, cross_scan, selective_scan_chunked, selective_scan_seq
from mtscan.tensor import Tape, Tensor
from mtscan.utils import make_rng

logger = logging.getLogger(Config.LOGGER_NAME)

SCOPES = ("kernels", "blocks", "model")
F64 = np.float64

Output = Union[Tensor, Sequence[Tensor], Dict[str, Tensor]]


def _flatten(out: Output) -> List[Tensor]:
    if isinstance(out, Tensor):
        return [out]
    if isinstance(out, dict):
        return list(out.values())
    return list(out)


class GradientProbe:
    """
    Finite-difference check of one differentiable computation

    Args:
        suite: Label reported in each entry
        fn: Builds the output from the current leaf values
        leaves: Named tensors to differentiate (parameters and inputs)
        rng: Draws the projection R and the probed entries
    """

    def __init__(self, suite: str, fn: Callable[[], Output], leaves: Dict[str, Tensor],
                 rng: np.random.Generator):
        self.suite, self.fn, self.leaves, self.rng = suite, fn, leaves, rng
        self.projections = [rng.standard_normal(t.shape) for t in _flatten(fn())]

    def loss(self) -> Tensor:
        total = None
        for out, proj in zip(_flatten(self.fn()), self.projections):
            term = T.tsum(out * Tensor(proj))
            total = term if total is None else total + term
        return total

    def analytic(self) -> Dict[str, np.ndarray]:
        with Tape() as tape:
            for leaf in self.leaves.values():
                tape.watch(leaf)
            tape.backward(self.loss())
        return {name: leaf.grad.copy() for name, leaf in self.leaves.items()}

    def run(self, eps: float = Config.GRADCHECK_EPS, tol: float = Config.GRADCHECK_TOL,
            max_entries: Optional[int] = Config.GRADCHECK_MAX_ENTRIES) -> List[GradcheckEntry]:
        grads = self.analytic()
        entries = []
        for name, leaf in self.leaves.items():
            flat = leaf.data.reshape(-1)
            count = flat.size if max_entries is None else min(max_entries, flat.size)
            worst = 0.0
            for index in self.rng.choice(flat.size, size=count, replace=False):
                original = flat[index]
                flat[index] = original + eps
                plus = self.loss().item()
                flat[index] = original - eps
                minus = self.loss().item()
                flat[index] = original
                numeric = (plus - minus) / (2 * eps)
                analytic = grads[name].reshape(-1)[index]
                err = abs(analytic - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err) if np.isfinite(err) else np.inf
            entries.append(GradcheckEntry(suite=self.suite, parameter=name,
                                          max_rel_err=float(worst), passed=bool(worst < tol),
                                          checked=int(count), size=int(flat.size)))
        return entries


def _input(rng: np.random.Generator, *shape: int, name: str = "x") -> Tensor:
    return Tensor(rng.standard_normal(shape), dtype=F64, name=name)


def _module_leaves(module: Module, prefix: str = "") -> Dict[str, Tensor]:
    return {prefix + name: p for name, p in module.named_parameters()}


def _probe(suite: str, fn: Callable[[], Output], leaves: Dict[str, Tensor],
           rng: np.random.Generator, module: Optional[Module] = None) -> GradientProbe:
    if module is not None:
        fill_zero_parameters(module, rng)
    return GradientProbe(suite, fn, leaves, rng)


# ============================================================================
# Suites
# ============================================================================

def kernel_probes(seed: int) -> List[GradientProbe]:
    """Tensor ops, the 1D kernels and the 2D cross scan"""
    rng = make_rng(seed, 100)
    probes = []

    lin_x = _input(rng, 2, 3, 4)
    w = Parameter(rng.standard_normal((4, 5)))
    b = Parameter(rng.standard_normal(5))
    probes.append(_probe("linear", lambda: T.linear(lin_x, w, b), {"x": lin_x, "W": w, "bias": b}, rng))

    for kind, stride in (("1x1", 1), ("3x3", 1), ("3x3", 2), ("3x3-depthwise", 1)):
        cout = 3 if kind == "3x3-depthwise" else 2
        conv = Conv2d(3, cout, rng, F64, kind=kind, stride=stride)
        img = _input(rng, 1, 4, 4, 3)
        probes.append(_probe(f"conv2d-{kind}-s{stride}", lambda c=conv, i=img: c(i),
                             {"x": img, **_module_leaves(conv)}, rng, conv))

    ln_x = _input(rng, 2, 3, 5)
    gamma, beta = Parameter(rng.uniform(0.5, 1.5, 5)), Parameter(rng.standard_normal(5))
    probes.append(_probe("layernorm", lambda: T.layer_norm(ln_x, gamma, beta),
                         {"x": ln_x, "gamma": gamma, "beta": beta}, rng))

    x4 = _input(rng, 2, 3, 3, 4)
    bn_gamma, bn_beta = Parameter(rng.uniform(0.5, 1.5, 4)), Parameter(rng.standard_normal(4))
    running_mean, running_var = np.zeros(4), np.ones(4)
    probes.append(_probe("batchnorm2d",
                         lambda: T.batch_norm2d(x4, bn_gamma, bn_beta, running_mean, running_var, training=True),
                         {"x": x4, "gamma": bn_gamma, "beta": bn_beta}, rng))

    up = _input(rng, 1, 3, 2, 2)
    probes.append(_probe("bilinear-x2", lambda: T.interpolate_bilinear(up, 2), {"x": up}, rng))
    ex = _input(rng, 1, 2, 2, 8)
    probes.append(_probe("rearrange-expand", lambda: T.rearrange_expand(ex, 2), {"x": ex}, rng))

    act = _input(rng, 3, 4)
    for kind in ("silu", "sigmoid", "softplus", "exp"):
        probes.append(_probe(f"elementwise-{kind}", lambda k=kind: T.elementwise(k, act), {"x": act}, rng))
    ma, mb = _input(rng, 2, 3, 4, name="a"), _input(rng, 2, 4, 2, name="b")
    probes.append(_probe("matmul", lambda: T.matmul(ma, mb), {"a": ma, "b": mb}, rng))

    params = SsmParams(4, 3, rng, F64)
    seq, src = _input(rng, 6, 4, name="x"), _input(rng, 6, 4, name="src")
    probes.append(_probe("selective-scan-seq", lambda: selective_scan_seq(params, seq, seq, chunk_size=4),
                         {"x": seq, **_module_leaves(params)}, rng))
    probes.append(_probe("selective-scan-chunked", lambda: selective_scan_chunked(params, seq, seq, chunk_size=2),
                         {"x": seq, **_module_leaves(params)}, rng))
    probes.append(_probe("cross-scan", lambda: cross_scan(params, seq, src),
                         {"query": seq, "shared": src, **_module_leaves(params)}, rng))

    ss2d_params = Ss2dParams(4, 2, rng, F64)
    query, shared = _input(rng, 1, 2, 3, 4, name="query"), _input(rng, 1, 2, 3, 4, name="shared")
    probes.append(_probe("css2d", lambda: css2d(ss2d_params, query, shared),
                         {"query": query, "shared": shared, **_module_leaves(ss2d_params)}, rng))

    attention = WindowAttention(4, rng, F64, window=2, heads=2)
    probes.append(_probe("window-attention", lambda: attention(query, shared),
                         {"query": query, "shared": shared, **_module_leaves(attention)}, rng, attention))
    return probes


def block_probes(seed: int) -> List[GradientProbe]:
    """Every decoder block, both heads and the toy encoder at tiny sizes"""
    rng = make_rng(seed, 200)
    probes = []

    ecr = ECR(4, rng, F64)
    x, skip = _input(rng, 1, 2, 2, 4), _input(rng, 1, 4, 4, 2, name="skip")
    probes.append(_probe("ecr", lambda: ecr(x, skip), {"x": x, "skip": skip, **_module_leaves(ecr)}, rng, ecr))

    stm = STM(BlockConfig(C=4, N=2), rng, F64)
    xs = _input(rng, 1, 3, 3, 4)
    probes.append(_probe("stm", lambda: stm(xs), {"x": xs, **_module_leaves(stm)}, rng, stm))

    for name, cls in (("f-ctm", FCTM), ("s-ctm", SCTM)):
        block = cls(BlockConfig(C=4, N=2, T=2), rng, F64)
        inputs = [_input(rng, 1, 2, 2, 4, name=f"x{t}") for t in range(2)]
        leaves = {f"x{t}": inp for t, inp in enumerate(inputs)}
        probes.append(_probe(name, lambda b=block, i=inputs: b(i), {**leaves, **_module_leaves(block)}, rng, block))

    for name, cls in (("dense-head", DenseHead), ("lite-head", LiteHead)):
        head = cls(2, 3, rng, F64)
        feat = _input(rng, 2, 2, 2, 2)
        probes.append(_probe(name, lambda h=head, f=feat: h(f), {"x": feat, **_module_leaves(head)}, rng, head))

    encoder = ToyEncoder(2, rng, F64)
    img = _input(rng, 1, 32, 32, 3, name="img")
    probes.append(_probe("toy-encoder", lambda: encoder(img), {"img": img, **_module_leaves(encoder)}, rng, encoder))
    return probes


def model_probes(seed: int) -> List[GradientProbe]:
    """Full three-stage model at C=8 with two tasks on a 32x32 image (8x8 head features)"""
    rng = make_rng(seed, 300)
    tasks = [t for t in default_tasks(2) if t.name in ("semseg", "depth")]
    model = MultiTaskModel(ModelConfig(C=8, N=2, tasks=tasks, seed=seed, dtype="f64"))
    img = _input(rng, 1, 32, 32, 3, name="img")
    return [_probe("model", lambda: model(img), {"img": img, **_module_leaves(model)}, rng, model)]


def run_scope(scope: str, seed: int = Config.SEED, eps: float = Config.GRADCHECK_EPS,
              tol: float = Config.GRADCHECK_TOL, max_entries: Optional[int] = None,
              full: bool = False) -> List[GradcheckEntry]:
    """
    Run every probe of a scope

    Args:
        max_entries: Entries sampled per leaf (2 for the model scope, GRADCHECK_MAX_ENTRIES otherwise)
        full: Compare every entry of every leaf

    Raises:
        ValueError: unknown scope or max_entries < 1
    """
    builders = {"kernels": kernel_probes, "blocks": block_probes, "model": model_probes}
    if scope not in builders:
        raise ValueError(f"unknown gradcheck scope {scope!r}, expected one of {SCOPES}")
    if full:
        max_entries = None
    elif max_entries is None:
        max_entries = 2 if scope == "model" else Config.GRADCHECK_MAX_ENTRIES
    elif max_entries < 1:
        raise ValueError(f"max_entries must be >= 1, got {max_entries}")
    entries = []
    for probe in builders[scope](seed):
        results = probe.run(eps=eps, tol=tol, max_entries=max_entries)
        failed = [e.parameter for e in results if not e.passed]
        if failed:
            logger.warning(f"gradcheck {probe.suite}: {len(failed)} leaves over tolerance, e.g. {failed[:3]}")
        entries.extend(results)
    return entries