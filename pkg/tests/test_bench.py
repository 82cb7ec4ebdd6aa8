import pytest

from app import bench


def test_small_run_agrees_and_reports():
    result = bench.run_bench(size=64, radius=3, repeats=1)
    assert result.size == 64 and result.fast_seconds > 0 and result.naive_seconds > 0
    lines = result.lines()
    assert lines[0] == "map 64x64, radius 3"
    assert lines[-1].startswith("speedup")


def test_derived_figures():
    result = bench.BenchResult(size=1000, radius=7, fast_seconds=0.5, naive_seconds=2.0)
    assert result.speedup == 4.0
    assert result.throughput(0.5) == pytest.approx(2.0)
    assert bench.BenchResult(10, 1, 0.0, 1.0).speedup == float("inf")


@pytest.mark.slow
def test_running_extremum_is_faster_at_full_size():
    assert bench.run_bench().speedup >= bench.MIN_SPEEDUP
