"""
Tests for the scan-vs-attention timing benchmark and its CSV format
"""

import io
import os
import sys

import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from mtscan.bench import CSV_HEADER, loglog_slope, read_csv, run_bench, time_call, write_csv
from mtscan.models import BenchRow


def test_time_call_warms_up_once():
    calls = []
    samples = time_call(lambda: calls.append(1), repeats=3)
    assert len(samples) == 3 and len(calls) == 4
    assert all(s >= 0 for s in samples)


def test_rows_and_single_repeat_stddev():
    rows = run_bench([8, 16], impls=["seq", "attention"], repeats=1, channels=4)
    assert [(r.impl, r.L) for r in rows] == [("seq", 8), ("seq", 16), ("attention", 8), ("attention", 16)]
    assert all(r.stddev == 0.0 for r in rows)
    assert all(r.mean_ns > 0 for r in rows)


@pytest.mark.parametrize("kwargs", [
    {"lengths": [16, 8]},
    {"lengths": [8, 8]},
    {"lengths": []},
    {"lengths": [8], "repeats": 0},
    {"lengths": [8], "impls": ["fft"]},
])
def test_invalid_arguments(kwargs):
    with pytest.raises(ValueError):
        run_bench(**kwargs)


def test_csv_layout():
    rows = [BenchRow(impl="chunked", L=256, mean_ns=1234.56, stddev=7.0)]
    handle = io.StringIO()
    text = write_csv(rows, handle)
    assert handle.getvalue() == text
    assert text.splitlines() == [",".join(CSV_HEADER), "chunked,256,1234.6,7.0"]
    assert read_csv(text)[0].L == 256


def test_read_csv_rejects_other_headers():
    with pytest.raises(ValueError):
        read_csv("impl,length,mean,std\nseq,8,1.0,0.0\n")


def test_loglog_slope():
    rows = [BenchRow(impl="attention", L=L, mean_ns=3.0 * L ** 2, stddev=0.0) for L in (64, 128, 256)]
    rows += [BenchRow(impl="seq", L=L, mean_ns=5.0 * L, stddev=0.0) for L in (64, 128, 256)]
    rows.append(BenchRow(impl="chunked", L=64, mean_ns=10.0, stddev=0.0))
    slopes = loglog_slope(rows)
    assert slopes["attention"] == pytest.approx(2.0)
    assert slopes["seq"] == pytest.approx(1.0)
    assert "chunked" not in slopes
