"""Runtime benchmark harness over seeded synthetic tissue images.

Each benchmark op gets a fresh pseudo-tissue image per size; wall times are
measured over `reps` repetitions and the median is reported, so one slow
outlier (page cache, lazy imports) cannot skew a row. The CSV schema is
fixed: ``module,op,side,seconds``.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from histograph import stain
from histograph.graphs import KnnParams, build_knn_graph
from histograph.features import FeatureMatrix
from histograph.nuclei import detect_nuclei
from histograph.raster import EntityTable
from histograph.superpixel import SlicParams, slic
from histograph.synth import synth_tissue_image
from histograph.tissue import detect_tissue

@dataclass
class BenchRow:
    module: str
    op: str
    side: int
    seconds: float
    repetitions: int

@dataclass
class BenchmarkReport:
    rows: list[BenchRow]

    def csv_text(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(["module", "op", "side", "seconds"])
        for row in self.rows:
            writer.writerow([row.module, row.op, row.side, format(row.seconds, ".6g")])
        return out.getvalue()

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(self.csv_text())

    def seconds_of(self, module: str, op: str, side: int) -> float:
        for row in self.rows:
            if (row.module, row.op, row.side) == (module, op, side):
                return row.seconds
        raise KeyError(f"no benchmark row for {module}.{op} at side {side}")

def measure(fn, reps: int = 3, clock=time.perf_counter, warmup: int = 1) -> float:
    """Median wall time of `reps` calls, after `warmup` untimed calls."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        start = clock()
        fn()
        times.append(clock() - start)
    times.sort()
    mid = len(times) // 2
    if len(times) % 2:
        return times[mid]
    return 0.5 * (times[mid - 1] + times[mid])

def _knn_inputs(side: int, seed: int):
    rng = np.random.default_rng(seed)
    n = max(16, side * side // 1500)
    cents = rng.uniform(0, side, size=(n, 2))
    bboxes = np.zeros((n, 4), dtype=np.int32)
    bboxes[:, 2:] = side
    table = EntityTable(np.arange(1, n + 1), cents, bboxes, np.ones(n, dtype=np.int64))
    feats = FeatureMatrix(rng.standard_normal((n, 8)), [f"f{i}" for i in range(8)])
    return table, feats

BENCH_OPS = {
    "macenko_normalize": ("stain", lambda img: stain.normalize(img, "macenko")),
    "vahadane_normalize": ("stain", lambda img: stain.normalize(img, "vahadane")),
    "tissue_mask": ("tissue", detect_tissue),
    "nuclei_detect": ("nuclei", detect_nuclei),
    "slic_400": ("superpixel", lambda img: slic(img, SlicParams(num_superpixels=400))),
}

def benchmark(sizes: list[int], ops: list[str] | None = None, reps: int = 3,
              seed: int = 0, clock=time.perf_counter) -> BenchmarkReport:
    """Time the selected ops on synthetic images of the given side lengths.

    Runs single-threaded (BLAS pools limited to one thread): timings are for
    one core, and multi-thread pool contention would otherwise make small
    rows bimodal.
    """
    from threadpoolctl import threadpool_limits

    for side in sizes:
        if side < 64:
            raise ValueError(f"benchmark sizes must be >= 64, got {side}")
    selected = list(BENCH_OPS) if ops is None else list(ops)
    rows = []
    with threadpool_limits(limits=1):
        for name in selected:
            if name == "knn_graph":
                for side in sizes:
                    table, feats = _knn_inputs(side, seed)
                    seconds = measure(
                        lambda: build_knn_graph(table, feats, KnnParams(k=5)), reps, clock)
                    rows.append(BenchRow("graph", "knn_graph", side, seconds, reps))
                continue
            if name not in BENCH_OPS:
                raise ValueError(f"unknown benchmark op {name!r}; "
                                 f"choose from {sorted(BENCH_OPS) + ['knn_graph']}")
            module, fn = BENCH_OPS[name]
            for side in sizes:
                img = synth_tissue_image(side, seed=seed)
                seconds = measure(lambda: fn(img), reps, clock)
                rows.append(BenchRow(module, name, side, seconds, reps))
    return BenchmarkReport(rows)

def scaling_exponent(report: BenchmarkReport, module: str, op: str,
                     sides: list[int]) -> float:
    """Least-squares slope of log(seconds) against log(pixel count)."""
    xs = np.log([s * s for s in sides])
    ys = np.log([report.seconds_of(module, op, s) for s in sides])
    slope = np.polyfit(xs, ys, 1)[0]
    return float(slope)
