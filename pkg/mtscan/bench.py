"""
Scan Benchmark
Wall-clock scaling of the selective scan kernels against full attention
"""

import csv
import io
import logging
import time
from typing import Callable, Dict, Iterable, List, Optional, Sequence, TextIO

import numpy as np

from mtscan.attention import sequence_attention
from mtscan.config import Config
from mtscan.models import BenchRow
from mtscan.ssm import SsmParams, selective_scan_chunked, selective_scan_seq
from mtscan.tensor import Tensor
from mtscan.utils import make_rng, resolve_threads

logger = logging.getLogger(Config.LOGGER_NAME)

IMPLS = ("seq", "chunked", "attention")
CSV_HEADER = ("impl", "L", "mean_ns", "stddev")


def _runner(impl: str, length: int, channels: int, rng: np.random.Generator,
            workers: int) -> Callable[[], object]:
    x = Tensor(rng.standard_normal((length, channels)).astype(np.float32))
    if impl == "attention":
        return lambda: sequence_attention(x, x, x)
    params = SsmParams(channels, Config.STATE_SIZE, rng, np.float32)
    if impl == "seq":
        return lambda: selective_scan_seq(params, x, x)
    return lambda: selective_scan_chunked(params, x, x, workers=workers)


def time_call(fn: Callable[[], object], repeats: int) -> List[int]:
    """One untimed warm-up call, then `repeats` timed calls in nanoseconds"""
    fn()
    samples = []
    for _ in range(repeats):
        start = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - start)
    return samples


def run_bench(lengths: Sequence[int] = Config.BENCH_LENGTHS, impls: Iterable[str] = IMPLS,
              repeats: int = Config.BENCH_REPEATS, channels: int = Config.BENCH_CHANNELS,
              parallel: bool = False, seed: int = Config.SEED) -> List[BenchRow]:
    """
    Time each implementation at each sequence length (f32, forward only)

    Args:
        lengths: Strictly ascending sequence lengths
        impls: Any of "seq", "chunked", "attention"
        repeats: Timed runs per point (stddev is the population stddev, 0 for one run)
        channels: Cinner of the scanned sequence / width of attention
        parallel: Let the chunked scan use up to MTK_THREADS workers
        seed: Input and parameter seed

    Returns:
        One BenchRow per (impl, L)
    """
    lengths = [int(v) for v in lengths]
    if not lengths or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError(f"lengths must be non-empty and strictly ascending, got {lengths}")
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    impls = list(impls)
    unknown = [i for i in impls if i not in IMPLS]
    if unknown:
        raise ValueError(f"unknown impls {unknown}, expected a subset of {IMPLS}")

    workers = resolve_threads() if parallel else 1
    rows = []
    for impl in impls:
        for length in lengths:
            fn = _runner(impl, length, channels, make_rng(seed, length), workers)
            samples = np.asarray(time_call(fn, repeats), dtype=np.float64)
            rows.append(BenchRow(impl=impl, L=length, mean_ns=float(samples.mean()),
                                 stddev=float(samples.std())))
            logger.debug(f"bench {impl} L={length}: {samples.mean() / 1e6:.3f} ms")
    return rows


def write_csv(rows: Sequence[BenchRow], handle: Optional[TextIO] = None) -> str:
    """Write rows under the fixed header; returns the CSV text"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow([row.impl, row.L, f"{row.mean_ns:.1f}", f"{row.stddev:.1f}"])
    text = buffer.getvalue()
    if handle is not None:
        handle.write(text)
    return text


def read_csv(text: str) -> List[BenchRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"bench CSV header must be {','.join(CSV_HEADER)}, got {reader.fieldnames}")
    return [BenchRow.model_validate(record) for record in reader]


def loglog_slope(rows: Sequence[BenchRow]) -> Dict[str, float]:
    """
    Least-squares slope of log(mean_ns) against log(L), per impl

    Impls with fewer than two lengths are omitted.
    """
    by_impl: Dict[str, List[BenchRow]] = {}
    for row in rows:
        by_impl.setdefault(row.impl, []).append(row)
    slopes = {}
    for impl, group in by_impl.items():
        if len(group) < 2:
            continue
        log_l = np.log([r.L for r in group])
        log_t = np.log([max(r.mean_ns, 1.0) for r in group])
        slopes[impl] = float(np.polyfit(log_l, log_t, 1)[0])
    return slopes
