"""
Reference Oracles
Direct loop implementations used to verify the vectorized kernels, and
the equivalence suites behind the `oracle` command
"""

import logging
import math
from typing import List, Optional

import numpy as np

from mtscan import tensor as T
from mtscan.config import Config
from mtscan.models import OracleEntry
from mtscan.scan2d import ALL_DIRECTIONS, ScanDirection, Ss2dParams, css2d, ss2d
from mtscan.ssm import ScanState, SsmParams, cross_scan, scan_step, selective_scan_chunked, selective_scan_seq
from mtscan.tensor import Tensor
from mtscan.utils import make_rng

logger = logging.getLogger(Config.LOGGER_NAME)

ORACLE_TOL = 1e-12
CHUNKED_TOL = 1e-10


def _softplus(v: float) -> float:
    return v if v > Config.SOFTPLUS_THRESHOLD else math.log1p(math.exp(v))


def brute_force_scan(params: SsmParams, x: np.ndarray, source: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Scalar-loop selective scan in f64, materializing every h_t

    Args:
        params: Kernel parameters
        x: [L, Cinner] query sequence
        source: [L, Cinner] parameter source (x if None)

    Returns:
        [L, Cinner]
    """
    source = x if source is None else source
    length, channels = x.shape
    states = params.d_state
    a_log, d_skip = params.a_log.data.astype(np.float64), params.d_skip.data.astype(np.float64)
    w_B, w_C = params.w_B.data.astype(np.float64), params.w_C.data.astype(np.float64)
    w_dt, w_up = params.w_dt.data.astype(np.float64), params.w_dt_up.data.astype(np.float64)
    dt_bias = params.dt_bias.data.astype(np.float64)

    h = np.zeros((channels, states))
    y = np.zeros((length, channels))
    for t in range(length):
        src = source[t]
        low_rank = [sum(src[i] * w_dt[i, r] for i in range(channels)) for r in range(params.dt_rank)]
        B_t = [sum(src[i] * w_B[i, n] for i in range(channels)) / channels for n in range(states)]
        C_t = [sum(src[i] * w_C[i, n] for i in range(channels)) / channels for n in range(states)]
        for c in range(channels):
            delta = _softplus(sum(low_rank[r] * w_up[r, c] for r in range(params.dt_rank)) + dt_bias[c])
            acc = 0.0
            for n in range(states):
                abar = math.exp(-delta * math.exp(a_log[c, n]))
                h[c, n] = abar * h[c, n] + delta * B_t[n] * x[t, c]
                acc += C_t[n] * h[c, n]
            y[t, c] = acc + d_skip[c] * x[t, c]
    return y


def brute_force_conv3x3(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Six-loop zero-padded 3x3 cross-correlation; weight [3, 3, Cin, Cout]"""
    batch, height, width, cin = x.shape
    cout = weight.shape[3]
    out = np.zeros((batch, height, width, cout))
    for b in range(batch):
        for r in range(height):
            for c in range(width):
                for o in range(cout):
                    acc = 0.0 if bias is None else bias[o]
                    for i in range(3):
                        for j in range(3):
                            rr, cc = r + i - 1, c + j - 1
                            if 0 <= rr < height and 0 <= cc < width:
                                acc += float(np.dot(x[b, rr, cc], weight[i, j, :, o]))
                    out[b, r, c, o] = acc
    return out


def bilinear_point(image: np.ndarray, scale: int, r: int, c: int) -> np.ndarray:
    """Value at output pixel (r, c) of align-corners=false upsampling of [H, W, C]"""
    height, width = image.shape[:2]

    def coords(index: int, size: int):
        src = max((index + 0.5) / scale - 0.5, 0.0)
        lo = min(int(math.floor(src)), size - 1)
        return lo, min(lo + 1, size - 1), src - lo

    r0, r1, fr = coords(r, height)
    c0, c1, fc = coords(c, width)
    top = (1 - fc) * image[r0, c0] + fc * image[r0, c1]
    bottom = (1 - fc) * image[r1, c0] + fc * image[r1, c1]
    return (1 - fr) * top + fr * bottom


def composed_css2d(params: Ss2dParams, query: np.ndarray, shared: np.ndarray,
                   active: Optional[List[ScanDirection]] = None) -> np.ndarray:
    """css2d assembled by hand from permutations and brute_force_scan; inputs [B, H, W, C]"""
    batch, height, width, channels = query.shape
    out = np.zeros_like(query, dtype=np.float64)
    for direction in (active or ALL_DIRECTIONS):
        perm = direction.permutation(height, width)
        for b in range(batch):
            q_seq = query[b].reshape(-1, channels)[perm]
            s_seq = shared[b].reshape(-1, channels)[perm]
            y = brute_force_scan(params.kernel(direction), q_seq, s_seq)
            folded = np.zeros_like(y)
            folded[perm] = y
            out[b] += folded.reshape(height, width, channels)
    return out


# ============================================================================
# Suites
# ============================================================================

def _entry(suite: str, case: str, diff: float, tol: float) -> OracleEntry:
    return OracleEntry(suite=suite, case=case, max_abs_diff=float(diff), tol=tol, passed=bool(diff < tol))


def kernel_oracle_suite(seed: int = Config.SEED, instances: int = 100) -> List[OracleEntry]:
    """selective_scan_seq and cross_scan vs the brute-force loop on random small instances"""
    rng = make_rng(seed, 400)
    entries = []
    for k in range(instances):
        length, channels, states = int(rng.integers(1, 33)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        params = SsmParams(channels, states, rng, np.float64)
        x, src = rng.standard_normal((length, channels)), rng.standard_normal((length, channels))
        seq = selective_scan_seq(params, Tensor(x), Tensor(x)).data
        cross = cross_scan(params, Tensor(x), Tensor(src)).data
        diff = max(np.abs(seq - brute_force_scan(params, x)).max(),
                   np.abs(cross - brute_force_scan(params, x, src)).max())
        entries.append(_entry("kernel-oracle", f"#{k} L={length} C={channels} N={states}", diff, ORACLE_TOL))
    return entries


def chunked_equivalence_suite(seed: int = Config.SEED, instances: int = 10) -> List[OracleEntry]:
    """selective_scan_chunked vs sequential for chunk sizes 1, 2, 7 and L"""
    rng = make_rng(seed, 401)
    entries = []
    for k in range(instances):
        length, channels, states = int(rng.integers(8, 65)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        params = SsmParams(channels, states, rng, np.float64)
        x = Tensor(rng.standard_normal((length, channels)))
        reference = selective_scan_seq(params, x, x).data
        for chunk in (1, 2, 7, length):
            diff = np.abs(selective_scan_chunked(params, x, x, chunk_size=chunk).data - reference).max()
            entries.append(_entry("chunked-equivalence", f"#{k} L={length} chunk={chunk}", diff, CHUNKED_TOL))
    return entries


def degeneracy_suite(seed: int = Config.SEED, configs: int = 20) -> List[OracleEntry]:
    """Cross scans fed the same sequence twice must be bit-identical to the self scans"""
    rng = make_rng(seed, 402)
    entries = []
    for k in range(configs):
        length, channels, states = int(rng.integers(1, 33)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        params = SsmParams(channels, states, rng, np.float64)
        x = Tensor(rng.standard_normal((length, channels)))
        same_1d = np.array_equal(cross_scan(params, x, x).data, selective_scan_seq(params, x, x).data)

        height, width = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        grid = Ss2dParams(channels, states, rng, np.float64)
        q = rng.standard_normal((1, height, width, channels))
        same_2d = np.array_equal(css2d(grid, Tensor(q), Tensor(q.copy())).data, ss2d(grid, Tensor(q)).data)
        entries.append(_entry("cssm-degeneracy", f"#{k} L={length} {height}x{width} C={channels} N={states}",
                              0.0 if same_1d and same_2d else np.inf, ORACLE_TOL))
    return entries


def composition_suite(seed: int = Config.SEED, configs: int = 3) -> List[OracleEntry]:
    """ss2d/css2d vs unfold + brute-force scan + fold by hand"""
    rng = make_rng(seed, 403)
    entries = []
    for k in range(configs):
        channels, states = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        grid = Ss2dParams(channels, states, rng, np.float64)
        q, s = rng.standard_normal((1, 4, 4, channels)), rng.standard_normal((1, 4, 4, channels))
        diff = max(np.abs(ss2d(grid, Tensor(q)).data - composed_css2d(grid, q, q)).max(),
                   np.abs(css2d(grid, Tensor(q), Tensor(s)).data - composed_css2d(grid, q, s)).max())
        entries.append(_entry("css2d-composition", f"#{k} C={channels} N={states}", diff, ORACLE_TOL))
    return entries


def conv_oracle_suite(seed: int = Config.SEED) -> List[OracleEntry]:
    rng = make_rng(seed, 404)
    x = rng.standard_normal((2, 5, 4, 3))
    weight, bias = rng.standard_normal((3, 3, 3, 2)), rng.standard_normal(2)
    fast = T.conv2d(Tensor(x), Tensor(weight), Tensor(bias), kind="3x3").data
    diff = np.abs(fast - brute_force_conv3x3(x, weight, bias)).max()
    return [_entry("conv-oracle", "3x3 5x4 Cin=3 Cout=2", diff, ORACLE_TOL)]


def streaming_suite(seed: int = Config.SEED, instances: int = 10) -> List[OracleEntry]:
    """Step-by-step scan_step outputs vs the batched cross scan"""
    rng = make_rng(seed, 405)
    entries = []
    for k in range(instances):
        length, channels, states = int(rng.integers(1, 33)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        params = SsmParams(channels, states, rng, np.float64)
        q, s = rng.standard_normal((2, length, channels)), rng.standard_normal((2, length, channels))
        state = ScanState.zeros(params, (2,))
        steps = []
        for t in range(length):
            y_t, state = scan_step(params, state, q[:, t], s[:, t])
            steps.append(y_t)
        diff = np.abs(np.stack(steps, axis=1) - cross_scan(params, Tensor(q), Tensor(s)).data).max()
        entries.append(_entry("streaming", f"#{k} L={length} C={channels} N={states}", diff, ORACLE_TOL))
    return entries


def run_all(seed: int = Config.SEED, instances: int = 100) -> List[OracleEntry]:
    entries = []
    for suite in (lambda: kernel_oracle_suite(seed, instances), lambda: chunked_equivalence_suite(seed),
                  lambda: degeneracy_suite(seed), lambda: composition_suite(seed), lambda: conv_oracle_suite(seed),
                  lambda: streaming_suite(seed)):
        entries.extend(suite())
    failed = [e for e in entries if not e.passed]
    if failed:
        logger.warning(f"{len(failed)} oracle comparisons over tolerance, e.g. {failed[0].suite} {failed[0].case}")
    return entries
