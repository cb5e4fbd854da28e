"""
Selective State-Space Kernels

1D selective scan (S6) and its cross variant:
    delta  = softplus(src W_dt W_dt_up + dt_bias)            (Δ > 0)
    B_t    = (src_t W_B) / Cinner,  C_t = (src_t W_C) / Cinner
    Abar   = exp(Δ A),  A = -exp(a_log)                      (A < 0)
    Bbar   = Δ B                                             (Euler form)
    h_t    = Abar_t ⊙ h_{t-1} + Bbar_t x_t,   h_0 = 0
    y_t    = <C_t, h_t> + D x_t

`src` is the parameter source. With src == x this is S6; with src taken
from a task-shared sequence and x a task-specific query it is the cross
scan used by the cross-task blocks.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from mtscan import tensor as T
from mtscan.config import Config
from mtscan.counter import charge
from mtscan.errors import ShapeError
from mtscan.nn import Module, Parameter
from mtscan.tensor import Tensor
from mtscan.utils import resolve_threads

logger = logging.getLogger(Config.LOGGER_NAME)


class SsmParams(Module):
    """
    Learned state of one selective-scan kernel

    Attributes:
        a_log: [Cinner, N], A = -exp(a_log), initialized to ln(n) for n = 1..N
        d_skip: [Cinner], skip gain D
        w_B, w_C: [Cinner, N] projections producing B_t, C_t
        w_dt: [Cinner, R], w_dt_up: [R, Cinner], dt_bias: [Cinner] low-rank Δ path
    """

    def __init__(self, d_inner: int, d_state: int, rng: np.random.Generator,
                 dtype=np.float64, dt_rank: Optional[int] = None):
        super().__init__()
        self.d_inner, self.d_state = d_inner, d_state
        self.dt_rank = dt_rank or max(1, d_inner // 16)

        states = np.arange(1, d_state + 1, dtype=np.float64)
        self.a_log = Parameter(np.tile(np.log(states), (d_inner, 1)).astype(dtype))
        self.d_skip = Parameter(np.ones(d_inner, dtype=dtype))

        bound = np.sqrt(3.0)
        self.w_B = Parameter(rng.uniform(-bound, bound, (d_inner, d_state)).astype(dtype))
        self.w_C = Parameter(rng.uniform(-bound, bound, (d_inner, d_state)).astype(dtype))

        dt_scale = self.dt_rank ** -0.5
        self.w_dt = Parameter((rng.uniform(-1.0, 1.0, (d_inner, self.dt_rank)) / np.sqrt(d_inner)).astype(dtype))
        self.w_dt_up = Parameter(rng.uniform(-dt_scale, dt_scale, (self.dt_rank, d_inner)).astype(dtype))

        # Inverse softplus of a log-uniform sample in [DT_MIN, DT_MAX]
        dt = np.exp(rng.uniform(np.log(Config.DT_MIN), np.log(Config.DT_MAX), d_inner))
        self.dt_bias = Parameter((dt + np.log(-np.expm1(-dt))).astype(dtype))


@dataclass
class ScanState:
    """Hidden state h_t [..., Cinner, N] carried between streaming steps"""

    h: np.ndarray

    @classmethod
    def zeros(cls, params: SsmParams, batch_shape: Tuple[int, ...] = ()) -> "ScanState":
        return cls(np.zeros(batch_shape + (params.d_inner, params.d_state), dtype=params.a_log.dtype))


def _skip(params: SsmParams, x: Tensor) -> Tensor:
    """D x with D lifted to x's rank"""
    return x * T.reshape(params.d_skip, (1,) * (x.ndim - 1) + (params.d_inner,))


def _check_sequence(x: Tensor, d_inner: int, label: str) -> None:
    if x.ndim < 2:
        raise ShapeError(f"{label} must be [..., L, Cinner], got {x.shape}")
    if x.shape[-2] < 1:
        raise ShapeError(f"{label} is an empty sequence")
    if x.shape[-1] != d_inner:
        raise ShapeError(f"{label} has {x.shape[-1]} channels, kernel expects {d_inner}")


def discretize(a_log: Tensor, delta: Tensor, B_seq: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Abar = exp(Δ A) and Bbar = Δ B

    Args:
        a_log: [Cinner, N]
        delta: [..., L, Cinner], strictly positive
        B_seq: [..., L, N]

    Returns:
        (Abar, Bbar), each [..., L, Cinner, N]

    Raises:
        ValueError: any Δ <= 0
    """
    if np.any(delta.data <= 0):
        raise ValueError("discretize requires delta > 0 everywhere")
    A = T.reshape(-T.exp(a_log), (1,) * (delta.ndim - 1) + a_log.shape)
    delta_col = T.reshape(delta, delta.shape + (1,))
    Abar = T.exp(delta_col * A)
    B_row = T.reshape(B_seq, B_seq.shape[:-1] + (1, B_seq.shape[-1]))
    Bbar = delta_col * B_row
    return Abar, Bbar


def s6_project(params: SsmParams, param_source: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Input-dependent B, C, Δ from the parameter source

    B_t and C_t are shared across channels: the per-channel projections are
    averaged over Cinner.

    Args:
        params: Kernel parameters
        param_source: [..., L, Cinner]

    Returns:
        (B_seq [..., L, N], C_seq [..., L, N], delta [..., L, Cinner])
    """
    _check_sequence(param_source, params.d_inner, "param_source")
    scale = 1.0 / params.d_inner
    B_seq = T.linear(param_source, params.w_B) * scale
    C_seq = T.linear(param_source, params.w_C) * scale
    delta = T.softplus(T.linear(T.linear(param_source, params.w_dt), params.w_dt_up, params.dt_bias))
    return B_seq, C_seq, delta


# ============================================================================
# Recurrence kernel (fused forward/backward)
# ============================================================================

def _local_states(Abar: np.ndarray, bx: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """States h_1..h_n of one chunk starting from h0; time axis is -3"""
    states = np.empty_like(bx)
    h = h0
    for t in range(bx.shape[-3]):
        h = Abar[..., t, :, :] * h + bx[..., t, :, :]
        states[..., t, :, :] = h
    return states


def _readout(states: np.ndarray, C_seq: np.ndarray) -> np.ndarray:
    """y_t[c] = sum_n C_t[n] h_t[c, n]"""
    return (states * C_seq[..., :, None, :]).sum(axis=-1)


def _chunk_bounds(length: int, chunk: int) -> List[Tuple[int, int]]:
    return [(start, min(start + chunk, length)) for start in range(0, length, chunk)]


def _forward_sequential(Abar, bx, C_seq, chunk):
    lead = bx.shape[:-3]
    h = np.zeros(lead + bx.shape[-2:], dtype=bx.dtype)
    y = np.empty(lead + bx.shape[-3:-1], dtype=bx.dtype)
    checkpoints = []
    for start, stop in _chunk_bounds(bx.shape[-3], chunk):
        checkpoints.append(h)
        states = _local_states(Abar[..., start:stop, :, :], bx[..., start:stop, :, :], h)
        y[..., start:stop, :] = _readout(states, C_seq[..., start:stop, :])
        h = states[..., -1, :, :]
    return y, checkpoints


def _forward_chunked(Abar, bx, C_seq, chunk, workers):
    """
    Chunks scanned independently from h = 0, then joined by a left fold:
    h_t = local_t + (prod of Abar since chunk start) * h_in
    """
    lead = bx.shape[:-3]
    bounds = _chunk_bounds(bx.shape[-3], chunk)
    zero = np.zeros(lead + bx.shape[-2:], dtype=bx.dtype)

    def local(bound):
        start, stop = bound
        a = Abar[..., start:stop, :, :]
        return _local_states(a, bx[..., start:stop, :, :], zero), np.cumprod(a, axis=-3)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pieces = list(pool.map(local, bounds))
    else:
        pieces = [local(bound) for bound in bounds]

    y = np.empty(lead + bx.shape[-3:-1], dtype=bx.dtype)
    checkpoints = []
    h_in = zero
    for (start, stop), (states, decay) in zip(bounds, pieces):
        checkpoints.append(h_in)
        states = states + decay * h_in[..., None, :, :]
        y[..., start:stop, :] = _readout(states, C_seq[..., start:stop, :])
        h_in = states[..., -1, :, :]
    return y, checkpoints


def scan_recurrence(Abar: Tensor, Bbar: Tensor, C_seq: Tensor, x: Tensor,
                    chunk_size: Optional[int] = None, parallel: bool = False,
                    workers: Optional[int] = None) -> Tensor:
    """
    y_t = <C_t, h_t> with h_t = Abar_t ⊙ h_{t-1} + Bbar_t x_t, h_0 = 0

    This is the raw recurrence without the D skip; it is also the seam for
    injecting precomputed Abar/Bbar. Only chunk-boundary states are kept;
    the backward pass recomputes the states inside each chunk.

    Args:
        Abar, Bbar: [..., L, Cinner, N]
        C_seq: [..., L, N]
        x: [..., L, Cinner]
        chunk_size: Recompute granularity (Config.SCAN_CHUNK_SIZE if None)
        parallel: Scan chunks independently and combine with a left fold
        workers: Thread count for the parallel path (capped by MTK_THREADS)

    Returns:
        Tensor[..., L, Cinner]
    """
    if Abar.shape != Bbar.shape or Abar.shape[:-1] != x.shape or C_seq.shape != Abar.shape[:-2] + Abar.shape[-1:]:
        raise ShapeError(f"scan shapes disagree: Abar {Abar.shape}, Bbar {Bbar.shape}, "
                         f"C {C_seq.shape}, x {x.shape}")
    length = x.shape[-2]
    if length < 1:
        raise ShapeError("scan over an empty sequence")
    chunk = chunk_size or Config.SCAN_CHUNK_SIZE
    if chunk < 1:
        raise ValueError(f"chunk size must be >= 1, got {chunk}")

    a, bbar, cs, xd = Abar.data, Bbar.data, C_seq.data, x.data
    charge("scan", xd.size * a.shape[-1] * Config.SCAN_FLOPS_PER_STATE)
    bx = bbar * xd[..., None]
    if parallel and chunk < length:
        y, checkpoints = _forward_chunked(a, bx, cs, chunk, resolve_threads(workers))
    else:
        y, checkpoints = _forward_sequential(a, bx, cs, chunk)

    def backward(gy):
        g_a = np.empty_like(a)
        g_b = np.empty_like(bbar)
        g_c = np.empty_like(cs)
        g_x = np.empty_like(xd)
        carry = np.zeros_like(checkpoints[0])
        for (start, stop), h0 in reversed(list(zip(_chunk_bounds(length, chunk), checkpoints))):
            span = (Ellipsis, slice(start, stop), slice(None), slice(None))
            states = _local_states(a[span], bx[span], h0)
            gy_c = gy[..., start:stop, :]
            g_c[..., start:stop, :] = (gy_c[..., None] * states).sum(axis=-2)
            inject = gy_c[..., :, :, None] * cs[..., start:stop, None, :]
            g_states = np.empty_like(states)
            for t in range(stop - start - 1, -1, -1):
                g_h = inject[..., t, :, :] + carry
                g_states[..., t, :, :] = g_h
                carry = a[..., start + t, :, :] * g_h
            previous = np.concatenate([h0[..., None, :, :], states[..., :-1, :, :]], axis=-3)
            g_a[span] = g_states * previous
            g_b[span] = g_states * xd[..., start:stop, :, None]
            g_x[..., start:stop, :] = (g_states * bbar[span]).sum(axis=-1)
        return g_a, g_b, g_c, g_x

    return T.apply_op("selective_scan", y, (Abar, Bbar, C_seq, x), backward)


# ============================================================================
# Public kernels
# ============================================================================

def _scan(params: SsmParams, x: Tensor, param_source: Tensor,
          chunk_size: Optional[int], parallel: bool, workers: Optional[int]) -> Tensor:
    _check_sequence(x, params.d_inner, "x")
    if x.shape != param_source.shape:
        raise ShapeError(f"query {x.shape} and parameter source {param_source.shape} differ")
    B_seq, C_seq, delta = s6_project(params, param_source)
    Abar, Bbar = discretize(params.a_log, delta, B_seq)
    y = scan_recurrence(Abar, Bbar, C_seq, x, chunk_size=chunk_size, parallel=parallel, workers=workers)
    return y + _skip(params, x)


def selective_scan_seq(params: SsmParams, x: Tensor, param_source: Tensor,
                       chunk_size: Optional[int] = None) -> Tensor:
    """
    Sequential selective scan

    Args:
        params: Kernel parameters
        x: [..., L, Cinner] sequence driven through the recurrence
        param_source: [..., L, Cinner] sequence generating B, C, Δ (x itself for S6)
        chunk_size: Backward recomputation granularity

    Returns:
        Tensor[..., L, Cinner]

    Raises:
        ShapeError: empty sequence or channel mismatch
    """
    return _scan(params, x, param_source, chunk_size, parallel=False, workers=None)


def selective_scan_chunked(params: SsmParams, x: Tensor, param_source: Tensor,
                           chunk_size: int = Config.SCAN_CHUNK_SIZE,
                           workers: Optional[int] = None) -> Tensor:
    """
    Chunked selective scan; same contract as selective_scan_seq

    Chunks are scanned from a zero state (optionally on `workers` threads)
    and joined by a fixed left fold. chunk_size >= L takes the sequential path.
    """
    if chunk_size < 1:
        raise ValueError(f"chunk size must be >= 1, got {chunk_size}")
    if chunk_size >= x.shape[-2]:
        return selective_scan_seq(params, x, param_source, chunk_size=chunk_size)
    return _scan(params, x, param_source, chunk_size, parallel=True, workers=workers)


def cross_scan(params: SsmParams, query: Tensor, shared: Tensor,
               chunk_size: Optional[int] = None) -> Tensor:
    """
    Cross selective scan: B, C, Δ come from `shared`, the recurrence is driven by `query`

    Raises:
        ShapeError: query and shared shapes differ
    """
    if query.shape != shared.shape:
        raise ShapeError(f"query {query.shape} and shared {shared.shape} differ")
    return _scan(params, query, shared, chunk_size, parallel=False, workers=None)


def multi_cross_scan(params: Sequence[SsmParams], queries: Sequence[Tensor],
                     sources: Sequence[Tensor], chunk_size: Optional[int] = None) -> List[Tensor]:
    """
    Several independent cross scans, each with its own parameters, run
    through one recurrence pass (sequences stacked on a new leading axis)

    Output k equals cross_scan(params[k], queries[k], sources[k]).
    """
    if not (len(params) == len(queries) == len(sources)) or not params:
        raise ValueError("multi_cross_scan needs equally many (>0) params, queries and sources")
    Abars, Bbars, Cs = [], [], []
    for p, q, s in zip(params, queries, sources):
        _check_sequence(q, p.d_inner, "query")
        if q.shape != s.shape:
            raise ShapeError(f"query {q.shape} and shared {s.shape} differ")
        B_seq, C_seq, delta = s6_project(p, s)
        Abar, Bbar = discretize(p.a_log, delta, B_seq)
        Abars.append(Abar)
        Bbars.append(Bbar)
        Cs.append(C_seq)
    y = scan_recurrence(T.stack(Abars), T.stack(Bbars), T.stack(Cs), T.stack(queries), chunk_size=chunk_size)
    return [y[k] + _skip(p, q) for k, (p, q) in enumerate(zip(params, queries))]


# ============================================================================
# Streaming
# ============================================================================

def scan_step(params: SsmParams, state: ScanState, x_t: np.ndarray,
              source_t: Optional[np.ndarray] = None) -> Tuple[np.ndarray, ScanState]:
    """
    One recurrent step for streaming inference (no tape)

    Args:
        params: Kernel parameters
        state: Previous hidden state
        x_t: [..., Cinner] input at this step
        source_t: [..., Cinner] parameter source (x_t if None)

    Returns:
        (y_t [..., Cinner], next state)
    """
    source_t = x_t if source_t is None else source_t
    step = lambda arr: Tensor(arr[..., None, :])
    B_seq, C_seq, delta = s6_project(params, step(source_t))
    Abar, Bbar = discretize(params.a_log, delta, B_seq)
    h = Abar.data[..., 0, :, :] * state.h + Bbar.data[..., 0, :, :] * x_t[..., :, None]
    y = (h * C_seq.data[..., 0, None, :]).sum(axis=-1) + params.d_skip.data * x_t
    return y, ScanState(h)
