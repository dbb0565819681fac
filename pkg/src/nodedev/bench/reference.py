"""Single-process oracles the distributed benchmarks are validated against.

These recompute each result with plain sequential loops (or, for the LU
residual, a dense numpy multiply), independent of the offload path, the
partitioning, and the in-kernel parallelism.
"""

from __future__ import annotations

import functools
import struct

import numpy as np

from . import data


def fib(n: int) -> int:
    a, b = 0, 1
    for _ in range(n):
        a, b = b, a + b
    return a


@functools.lru_cache(maxsize=8)
def vecadd_bytes(n: int) -> bytes:
    a, b = data.vec_pair(n)
    out = [a[i] + b[i] for i in range(n)]
    return struct.pack(f"<{n}d", *out)


def escape_count(cr: float, ci: float, max_iter: int) -> int:
    zr = 0.0
    zi = 0.0
    count = 0
    while count < max_iter:
        zr, zi = zr * zr - zi * zi + cr, 2.0 * zr * zi + ci
        count += 1
        if zr * zr + zi * zi > 4.0:
            break
    return count


@functools.lru_cache(maxsize=4)
def mandelbrot_bytes(width: int, height: int, max_iter: int) -> bytes:
    """Escape-time image over a viewport centered at (-0.5, 0), 3.0 wide."""
    out = bytearray(width * height)
    scale = 3.0 / width
    pos = 0
    for y in range(height):
        ci = (y - height / 2 + 0.5) * scale
        for x in range(width):
            cr = -0.5 + (x - width / 2 + 0.5) * scale
            out[pos] = escape_count(cr, ci, max_iter) & 0xFF
            pos += 1
    return bytes(out)


@functools.lru_cache(maxsize=4)
def align_bytes(m: int, work: int) -> bytes:
    t1, t2 = data.align_tables()
    out = []
    for i in range(m):
        acc = 0.0
        for j in range(work):
            acc = acc * 1.0000001 + t1[(i * 31 + j) % 4096] * t2[(i * 17 + j) % 4096]
        out.append(acc)
    return struct.pack(f"<{m}d", *out)


def sparselu_residual(factored: bytes, blocks: int, block_size: int, k: int) -> float:
    """Worst relative residual max|L*U - A| / max|A| over the k sub-matrices.

    L is the unit lower triangle and U the upper triangle of each
    factored sub-matrix; A is the regenerated original.
    """
    n = (blocks // k) * block_size
    sub_bytes = 8 * n * n
    if len(factored) != k * sub_bytes:
        raise ValueError(
            f"expected {k} sub-matrices of {sub_bytes} bytes, got {len(factored)} bytes")
    worst = 0.0
    for which in range(k):
        lu = np.frombuffer(
            factored[which * sub_bytes:(which + 1) * sub_bytes], dtype="<f8")
        lu = lu.reshape(n, n)
        lower = np.tril(lu, -1) + np.eye(n)
        upper = np.triu(lu)
        original = np.frombuffer(
            bytes(data.dense_submatrix(blocks, block_size, k, which)),
            dtype="<f8").reshape(n, n)
        residual = np.abs(lower @ upper - original).max()
        scale = np.abs(original).max()
        worst = max(worst, residual / scale)
    return worst
