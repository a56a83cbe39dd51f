"""Wall-clock inference timing, reported as seconds per 100k points."""

import os
import platform
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .baselines import estimate_normals
from .data import ShapeSpec, synth_shape

PER_POINTS = 100_000


def machine_descriptor():
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "cpu_count": os.cpu_count() or 1,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


@dataclass
class BenchResult:
    target: str
    points: int
    repetitions: int
    workers: int
    seconds: list          # raw wall-clock per repetition
    median_seconds: float

    @property
    def seconds_per_100k(self):
        return self.median_seconds * PER_POINTS / self.points


def _estimate_chunk(args):
    cloud, target, k, queries, checkpoint = args
    if target == "pff":
        from .train import estimate
        return estimate(cloud, "pff", checkpoint, queries=queries)
    return estimate_normals(cloud, k, target, queries=queries)


def time_estimator(cloud, target="pca", k=16, repetitions=3, workers=1, checkpoint=None):
    """Median wall-clock over ``repetitions`` full passes over the cloud.

    With ``workers > 1`` the query set is split into contiguous chunks
    handled by separate processes; pool start-up is outside the timing.
    """
    if repetitions < 1 or workers < 1:
        raise ValueError("repetitions and workers must be >= 1")
    if target == "pff" and checkpoint is None:
        raise ValueError("timing the learned estimator needs a checkpoint")
    chunks = np.array_split(np.arange(len(cloud)), workers)
    jobs = [(cloud, target, k, q, checkpoint) for q in chunks if len(q)]
    times = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        if pool is not None:
            list(pool.map(_estimate_chunk, jobs[:1]))  # warm the workers
        for _ in range(repetitions):
            t0 = time.perf_counter()
            if pool is None:
                for job in jobs:
                    _estimate_chunk(job)
            else:
                list(pool.map(_estimate_chunk, jobs))
            times.append(time.perf_counter() - t0)
    finally:
        if pool is not None:
            pool.shutdown()
    label = target if target == "pff" else f"{target}-k{k}"
    return BenchResult(label, len(cloud), repetitions, workers, times, statistics.median(times))


def bench(target="pca", points=100_000, repetitions=3, k=16, workers=None, checkpoint=None, seed=0):
    """Single-thread and multi-worker timings on a synthetic sphere."""
    cloud = synth_shape(ShapeSpec(kind="sphere", count=points, seed=seed))
    workers = workers or (os.cpu_count() or 1)
    results = [time_estimator(cloud, target, k, repetitions, 1, checkpoint)]
    if workers > 1:
        results.append(time_estimator(cloud, target, k, repetitions, workers, checkpoint))
    return results


def format_report(results, machine=None):
    machine = machine or machine_descriptor()
    lines = [f"{key} {value}" for key, value in machine.items()]
    if machine.get("cpu_count", 1) < 2:
        lines.append("note single core: multi-worker timing skipped")
    lines.append("target,points,workers,repetitions,median_s,s_per_100k")
    for r in results:
        lines.append(f"{r.target},{r.points},{r.workers},{r.repetitions},"
                     f"{r.median_seconds:.6f},{r.seconds_per_100k:.6f}")
    return "\n".join(lines) + "\n"
