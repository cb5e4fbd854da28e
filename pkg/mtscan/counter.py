"""
Analytic FLOP accounting

Ops charge the active counter from their operand shapes:
    linear     Cin * Cout * positions * 2
    conv 3x3   9 * Cin * Cout * positions * 2   (9 * C * positions * 2 depthwise)
    matmul     M * K * N * batch * 2
    scan       positions * Cinner * N * Config.SCAN_FLOPS_PER_STATE
Elementwise ops, normalization and reshapes are not charged.
"""

from collections import defaultdict
from contextlib import contextmanager
from typing import Dict, Iterator, Optional


class FlopCounter:
    """Running FLOP totals, overall and per op kind"""

    def __init__(self):
        self.total = 0
        self.by_kind: Dict[str, int] = defaultdict(int)

    def add(self, kind: str, flops: int) -> None:
        self.total += int(flops)
        self.by_kind[kind] += int(flops)


_active: Optional[FlopCounter] = None


@contextmanager
def counting() -> Iterator[FlopCounter]:
    """Collect FLOPs charged by every op run inside the block"""
    global _active
    previous, _active = _active, FlopCounter()
    try:
        yield _active
    finally:
        _active = previous


def charge(kind: str, flops: int) -> None:
    if _active is not None:
        _active.add(kind, flops)
