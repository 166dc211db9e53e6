"""Throughput benchmark for the fusion pipeline.

Times the full pass (gradients, windowed stats, masks, gating) on one pair
with a per-stage breakdown, and measures batch throughput across a worker
pool. OpenCV's internal pool is pinned to one thread while timing so the
single-pass numbers are honestly single-threaded and batch scaling comes
only from the worker pool.
"""

from __future__ import annotations

import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import cv2

from .errors import InputError
from .gating import (
    DEFAULT_K1,
    DEFAULT_K2,
    DEFAULT_WINDOW,
    FusionResult,
    SsimParams,
    apply_gating,
    fuse_pair,
    normalize_masks,
    raw_masks,
    window_stats,
)
from .gradients import gradient_field
from .tensor_io import MultispectralPair

STAGE_NAMES = ("gradients", "stats", "masks", "gating")


@contextmanager
def single_threaded_ops():
    """Pin OpenCV's pool to one thread for the duration."""
    previous = cv2.getNumThreads()
    cv2.setNumThreads(1)
    try:
        yield
    finally:
        cv2.setNumThreads(previous)


def fuse_pair_timed(
    pair: MultispectralPair,
    window: int = DEFAULT_WINDOW,
    k1: float = DEFAULT_K1,
    k2: float = DEFAULT_K2,
) -> tuple[FusionResult, dict[str, float]]:
    """One full pass with per-stage wall times in seconds."""
    t0 = time.perf_counter()
    grad_field = gradient_field(pair.rgb, pair.thermal)
    t1 = time.perf_counter()
    params = SsimParams(L=grad_field.dynamic_range, k1=k1, k2=k2, window=window)
    stats = window_stats(grad_field, params)
    t2 = time.perf_counter()
    masks = normalize_masks(*raw_masks(stats, params))
    t3 = time.perf_counter()
    gated_rgb, gated_t = apply_gating(pair, masks)
    t4 = time.perf_counter()
    result = FusionResult(gated_rgb=gated_rgb, gated_thermal=gated_t, masks=masks, params=params)
    stages = {
        "gradients": t1 - t0,
        "stats": t2 - t1,
        "masks": t3 - t2,
        "gating": t4 - t3,
    }
    return result, stages


def _p95(samples: Sequence[float]) -> float:
    ordered = sorted(samples)
    rank = math.ceil(0.95 * len(ordered)) - 1
    return ordered[max(0, rank)]


@dataclass(frozen=True)
class BenchReport:
    """Single-pair latency report; times in milliseconds."""

    width: int
    height: int
    iterations: int
    warmup: int
    include_io: bool
    min_ms: float
    median_ms: float
    p95_ms: float
    pixels_per_second: float
    stage_median_ms: dict[str, float]

    def as_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "iterations": self.iterations,
            "warmup": self.warmup,
            "include_io": self.include_io,
            "min_ms": self.min_ms,
            "median_ms": self.median_ms,
            "p95_ms": self.p95_ms,
            "pixels_per_second": self.pixels_per_second,
            "stage_median_ms": dict(self.stage_median_ms),
        }


def run_benchmark(
    pair: MultispectralPair,
    iterations: int,
    warmup: int = 1,
    window: int = DEFAULT_WINDOW,
    k1: float = DEFAULT_K1,
    k2: float = DEFAULT_K2,
    loader: Callable[[], MultispectralPair] | None = None,
) -> BenchReport:
    """Time repeated full passes on one pair.

    Warmup iterations run first and are excluded. When a loader is given
    its call (image decode) is included in each timed pass and the pair
    argument is only a shape reference.
    """
    if iterations < 1:
        raise InputError(f"iterations must be >= 1, got {iterations}")
    if warmup < 0:
        raise InputError(f"warmup must be >= 0, got {warmup}")
    totals: list[float] = []
    stage_samples: dict[str, list[float]] = {name: [] for name in STAGE_NAMES}
    with single_threaded_ops():
        for _ in range(warmup):
            fuse_pair_timed(pair, window=window, k1=k1, k2=k2)
        for _ in range(iterations):
            t0 = time.perf_counter()
            current = loader() if loader is not None else pair
            _, stages = fuse_pair_timed(current, window=window, k1=k1, k2=k2)
            totals.append(time.perf_counter() - t0)
            for name in STAGE_NAMES:
                stage_samples[name].append(stages[name])
    median_s = statistics.median(totals)
    return BenchReport(
        width=pair.width,
        height=pair.height,
        iterations=iterations,
        warmup=warmup,
        include_io=loader is not None,
        min_ms=min(totals) * 1e3,
        median_ms=median_s * 1e3,
        p95_ms=_p95(totals) * 1e3,
        pixels_per_second=(pair.width * pair.height) / median_s if median_s > 0 else float("inf"),
        stage_median_ms={
            name: statistics.median(samples) * 1e3 for name, samples in stage_samples.items()
        },
    )


def _fuse_many(pairs: Sequence[MultispectralPair], workers: int, window, k1, k2) -> float:
    t0 = time.perf_counter()
    if workers == 1:
        for pair in pairs:
            fuse_pair(pair, window=window, k1=k1, k2=k2)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda p: fuse_pair(p, window=window, k1=k1, k2=k2), pairs))
    return time.perf_counter() - t0


@dataclass(frozen=True)
class BatchBenchReport:
    """Batch throughput with a single-worker baseline for scaling."""

    n_pairs: int
    workers: int
    baseline_workers: int
    seconds: float
    baseline_seconds: float
    pairs_per_second: float
    speedup: float

    def as_dict(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "workers": self.workers,
            "baseline_workers": self.baseline_workers,
            "seconds": self.seconds,
            "baseline_seconds": self.baseline_seconds,
            "pairs_per_second": self.pairs_per_second,
            "speedup": self.speedup,
        }


def run_batch_benchmark(
    pairs: Sequence[MultispectralPair],
    workers: int,
    baseline_workers: int = 1,
    warmup: int = 1,
    window: int = DEFAULT_WINDOW,
    k1: float = DEFAULT_K1,
    k2: float = DEFAULT_K2,
) -> BatchBenchReport:
    """Fuse a set of pairs through a worker pool and against a baseline.

    The numeric kernels release the GIL, so thread workers scale with
    physical cores; speedup is baseline time over pool time.
    """
    if not pairs:
        raise InputError("batch benchmark needs at least one pair")
    if workers < 1 or baseline_workers < 1:
        raise InputError(f"worker counts must be >= 1, got {workers}, {baseline_workers}")
    with single_threaded_ops():
        for _ in range(warmup):
            fuse_pair(pairs[0], window=window, k1=k1, k2=k2)
        baseline_s = _fuse_many(pairs, baseline_workers, window, k1, k2)
        pool_s = _fuse_many(pairs, workers, window, k1, k2)
    return BatchBenchReport(
        n_pairs=len(pairs),
        workers=workers,
        baseline_workers=baseline_workers,
        seconds=pool_s,
        baseline_seconds=baseline_s,
        pairs_per_second=len(pairs) / pool_s if pool_s > 0 else float("inf"),
        speedup=baseline_s / pool_s if pool_s > 0 else float("inf"),
    )
