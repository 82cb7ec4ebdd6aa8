"""Throughput of the running-extremum filter against the per-offset loop."""
import logging
import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .priors import naive_extremum, sliding_extremum

logger = logging.getLogger(__name__)

MIN_SPEEDUP = 3.0


@dataclass(frozen=True)
class BenchResult:
    size: int
    radius: int
    fast_seconds: float
    naive_seconds: float

    @property
    def speedup(self) -> float:
        return self.naive_seconds / self.fast_seconds if self.fast_seconds > 0 else float("inf")

    def throughput(self, seconds: float) -> float:
        """Megapixels per second."""
        return self.size * self.size / seconds / 1e6 if seconds > 0 else float("inf")

    def lines(self) -> list[str]:
        return [
            f"map {self.size}x{self.size}, radius {self.radius}",
            f"sliding  {self.fast_seconds * 1e3:9.2f} ms  {self.throughput(self.fast_seconds):8.2f} Mpx/s",
            f"naive    {self.naive_seconds * 1e3:9.2f} ms  {self.throughput(self.naive_seconds):8.2f} Mpx/s",
            f"speedup  {self.speedup:9.2f}x",
        ]


def _best_of(fn: Callable[[], np.ndarray], repeats: int) -> tuple[float, np.ndarray]:
    best, out = float("inf"), None
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - start)
    return best, out


def run_bench(size: int = 1024, radius: int = 7, repeats: int = 3, seed: int = 0) -> BenchResult:
    values = np.random.default_rng(seed).random((size, size))
    fast_s, fast = _best_of(lambda: sliding_extremum(values, radius, "min"), repeats)
    naive_s, naive = _best_of(lambda: naive_extremum(values, radius, "min"), repeats)
    if not np.array_equal(fast, naive):
        raise AssertionError("sliding and naive extremum disagree")
    result = BenchResult(size, radius, fast_s, naive_s)
    logger.info("bench %dx%d r=%d: %.2fx speedup", size, size, radius, result.speedup)
    return result
