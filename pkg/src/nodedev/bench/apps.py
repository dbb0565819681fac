"""Distributed benchmark drivers, timing, and CSV reporting.

Each driver splits its problem over k devices, issues one nowait offload
per device, waits for all of them, and reassembles the result on the
host. Timing covers only that parallel section, never worker spawn or
shutdown. Validation compares against the oracles in `reference`.
"""

from __future__ import annotations

import csv
import math
import struct
import time
from array import array
from dataclasses import dataclass
from typing import Callable

from ..hostrt import Runtime, map_from, map_to, map_tofrom, wait_all
from ..workerrt import ExecutionContext, default_pool_width
from . import data, kernels, reference

SPARSELU_TOLERANCE = 1e-10


@dataclass
class BenchResult:
    output: bytes
    seconds: float


@dataclass
class BenchReport:
    benchmark: str
    k: int
    threads_per_device: int
    mean_seconds: float
    valid: bool
    speedup_vs_k1: float | None


def pick_devices(rt: Runtime, k: int) -> list[int]:
    """Which k devices run the benchmark.

    Workers (devices 1..k) are preferred; the host, device 0, joins in
    only when the runtime has exactly k devices in total.
    """
    if k < 1:
        raise ValueError(f"need at least one device, got k={k}")
    if k < rt.device_count:
        return list(range(1, k + 1))
    if k == rt.device_count:
        return list(range(k))
    raise ValueError(
        f"k={k} exceeds the runtime's device count ({rt.device_count})")


def ceil_chunks(n: int, k: int) -> list[tuple[int, int]]:
    """k (start, count) sections of ceil(n/k); the last takes the remainder.

    Sections with count 0 are kept so device order is stable; together
    the sections tile [0, n).
    """
    chunk = math.ceil(n / k) if n else 0
    sections = []
    for d in range(k):
        start = min(d * chunk, n)
        sections.append((start, min(chunk, n - start)))
    return sections


def strip_heights(height: int, k: int) -> list[int]:
    """Rows per device, as even as possible; the first height % k get one extra."""
    base, extra = divmod(height, k)
    return [base + (1 if d < extra else 0) for d in range(k)]


def fib_frontier(n: int, k: int) -> list[int]:
    """Expand {n} by splitting the largest element m >= 2 into m-1, m-2
    (ties: leftmost) until there are k elements or none is expandable."""
    frontier = [n]
    while len(frontier) < k:
        m = max(frontier)
        if m < 2:
            break
        at = frontier.index(m)
        frontier[at:at + 1] = [m - 1, m - 2]
    return frontier


def run_vecadd(rt: Runtime, params: dict, k: int) -> BenchResult:
    n = params["n"]
    a, b = data.vec_pair(n)
    c = array("d", bytes(8 * n))
    devices = pick_devices(rt, k)
    sections = ceil_chunks(n, k)

    t0 = time.perf_counter()
    pendings = []
    for device, (start, count) in zip(devices, sections):
        if count == 0:
            continue
        maps = [
            map_to(a, 8, start, count),
            map_to(b, 8, start, count),
            map_from(c, 8, start, count),
        ]
        pendings.append(rt.target_execute(
            device, "vecadd", maps, struct.pack("<I", count), nowait=True))
    wait_all(pendings)
    seconds = time.perf_counter() - t0
    return BenchResult(bytes(memoryview(c).cast("B")), seconds)


def run_mandelbrot(rt: Runtime, params: dict, k: int) -> BenchResult:
    width, height, max_iter = params["width"], params["height"], params["max_iter"]
    image = bytearray(width * height)
    devices = pick_devices(rt, k)
    heights = strip_heights(height, k)

    t0 = time.perf_counter()
    pendings = []
    row = 0
    for device, rows in zip(devices, heights):
        if rows == 0:
            continue
        maps = [map_from(image, 1, row * width, rows * width)]
        scalars = struct.pack("<IIIII", width, height, max_iter, row, rows)
        pendings.append(rt.target_execute(
            device, "mandelbrot", maps, scalars, nowait=True))
        row += rows
    wait_all(pendings)
    seconds = time.perf_counter() - t0
    return BenchResult(bytes(image), seconds)


def run_fib(rt: Runtime, params: dict, k: int) -> BenchResult:
    n = params["n"]
    devices = pick_devices(rt, k)
    frontier = fib_frontier(n, k)
    results = [bytearray(8) for _ in frontier]

    t0 = time.perf_counter()
    pendings = []
    for device, value, out in zip(devices, frontier, results):
        maps = [map_from(out, 8, 0, 1)]
        pendings.append(rt.target_execute(
            device, "fib", maps, struct.pack("<I", value), nowait=True))
    wait_all(pendings)
    total = sum(struct.unpack("<Q", bytes(out))[0] for out in results)
    seconds = time.perf_counter() - t0
    return BenchResult(struct.pack("<Q", total), seconds)


def run_sparselu(rt: Runtime, params: dict, k: int) -> BenchResult:
    blocks, block_size = params["blocks"], params["block_size"]
    if blocks % k:
        raise ValueError(f"{blocks} blocks cannot be split over {k} devices")
    devices = pick_devices(rt, k)
    subs = [data.dense_submatrix(blocks, block_size, k, d) for d in range(k)]
    sub_blocks = blocks // k

    t0 = time.perf_counter()
    pendings = []
    for d, (device, sub) in enumerate(zip(devices, subs)):
        maps = [map_tofrom(sub, 8)]
        scalars = struct.pack("<III", sub_blocks, block_size, d * sub_blocks)
        pendings.append(rt.target_execute(
            device, "sparselu", maps, scalars, nowait=True))
    wait_all(pendings)
    seconds = time.perf_counter() - t0
    return BenchResult(b"".join(bytes(memoryview(s).cast("B")) for s in subs), seconds)


def sparselu_local(params: dict, k: int) -> bytes:
    """The same k sub-factorizations run in-process, for bitwise comparison."""
    blocks, block_size = params["blocks"], params["block_size"]
    sub_blocks = blocks // k
    ctx = ExecutionContext(0)
    try:
        out = []
        for d in range(k):
            sub = data.dense_submatrix(blocks, block_size, k, d)
            view = memoryview(sub).cast("B").cast("d")
            kernels.factor_blocked(view, sub_blocks, block_size, d * sub_blocks, ctx)
            out.append(bytes(memoryview(sub).cast("B")))
        return b"".join(out)
    finally:
        ctx.close()


def run_align(rt: Runtime, params: dict, k: int) -> BenchResult:
    m, work = params["m"], params["work"]
    scores = array("d", bytes(8 * m))
    devices = pick_devices(rt, k)
    sections = ceil_chunks(m, k)

    t0 = time.perf_counter()
    pendings = []
    for device, (start, count) in zip(devices, sections):
        if count == 0:
            continue
        maps = [map_from(scores, 8, start, count)]
        scalars = struct.pack("<III", start, count, work)
        pendings.append(rt.target_execute(
            device, "align", maps, scalars, nowait=True))
    wait_all(pendings)
    seconds = time.perf_counter() - t0
    return BenchResult(bytes(memoryview(scores).cast("B")), seconds)


def _validate_vecadd(params, k, output):
    return output == reference.vecadd_bytes(params["n"])


def _validate_mandelbrot(params, k, output):
    return output == reference.mandelbrot_bytes(
        params["width"], params["height"], params["max_iter"])


def _validate_fib(params, k, output):
    return struct.unpack("<Q", output)[0] == reference.fib(params["n"])


def _validate_sparselu(params, k, output):
    residual = reference.sparselu_residual(
        output, params["blocks"], params["block_size"], k)
    return residual <= SPARSELU_TOLERANCE


def _validate_align(params, k, output):
    return output == reference.align_bytes(params["m"], params["work"])


@dataclass(frozen=True)
class Benchmark:
    name: str
    run: Callable[[Runtime, dict, int], BenchResult]
    validate: Callable[[dict, int, bytes], bool]


BENCHMARKS = {
    "vecadd": Benchmark("vecadd", run_vecadd, _validate_vecadd),
    "mandelbrot": Benchmark("mandelbrot", run_mandelbrot, _validate_mandelbrot),
    "fib": Benchmark("fib", run_fib, _validate_fib),
    "sparselu": Benchmark("sparselu", run_sparselu, _validate_sparselu),
    "align": Benchmark("align", run_align, _validate_align),
}


def run_report(rt: Runtime, name: str, params: dict, ks, repeats: int = 10) -> list[BenchReport]:
    """Run a benchmark `repeats` times per device count and average.

    A failed validation marks the row invalid; its timing is still
    reported. Speedups are relative to the k=1 mean when measured.
    """
    bench = BENCHMARKS[name]
    threads = default_pool_width()
    rows = []
    for k in sorted(set(ks)):
        results = [bench.run(rt, params, k) for _ in range(repeats)]
        valid = all(bench.validate(params, k, r.output) for r in results)
        mean = sum(r.seconds for r in results) / len(results)
        rows.append(BenchReport(name, k, threads, mean, valid, None))
    k1 = next((row.mean_seconds for row in rows if row.k == 1), None)
    if k1 is not None:
        for row in rows:
            row.speedup_vs_k1 = k1 / row.mean_seconds if row.mean_seconds > 0 else None
    return rows


CSV_COLUMNS = ["benchmark", "k", "threads_per_device",
               "mean_seconds", "valid", "speedup_vs_k1"]


def report_rows(reports: list[BenchReport]) -> list[list[str]]:
    rows = [list(CSV_COLUMNS)]
    for r in reports:
        rows.append([
            r.benchmark,
            str(r.k),
            str(r.threads_per_device),
            f"{r.mean_seconds:.6f}",
            "ok" if r.valid else "INVALID",
            "" if r.speedup_vs_k1 is None else f"{r.speedup_vs_k1:.3f}",
        ])
    return rows


def write_csv(reports: list[BenchReport], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(report_rows(reports))


def save_image(image: bytes, width: int, height: int, path: str) -> None:
    """Dump a mandelbrot image: PGM if the path ends in .pgm, else raw bytes."""
    with open(path, "wb") as fh:
        if path.endswith(".pgm"):
            fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(image)
