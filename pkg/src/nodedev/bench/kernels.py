"""Device-side kernels for the benchmark applications.

Every process that takes part in a benchmark run builds this exact
table, in this exact order, before the bootstrap handshake; the table
index is the kernel's identity on the wire.
"""

from __future__ import annotations

import struct
import threading
from array import array

from ..registry import KernelTable
from . import data

FIB_TASK_CUTOFF = 20


def build_kernel_table() -> tuple[KernelTable, list]:
    table = KernelTable()
    table.register("vecadd", vecadd)
    table.register("mandelbrot", mandelbrot_strip)
    table.register("fib", fib_value)
    table.register("sparselu", sparselu_factor)
    table.register("align", align_scores)
    table.register("noop", noop)
    return table, data.align_globals_spec()


def noop(ctx, regions, scalars):
    pass


def vecadd(ctx, regions, scalars):
    # regions: a (to), b (to), c (from); scalars: count u32
    (count,) = struct.unpack("<I", scalars)
    a = regions[0].cast("d")
    b = regions[1].cast("d")
    c = regions[2].cast("d")

    def body(i):
        c[i] = a[i] + b[i]

    ctx.parallel_for(0, count, body)


def mandelbrot_strip(ctx, regions, scalars):
    # regions: strip bytes (from); scalars: width, height, max_iter,
    # row_start, row_count, all u32. One byte per pixel: iterations mod 256.
    width, height, max_iter, row_start, row_count = struct.unpack("<IIIII", scalars)
    out = regions[0]
    scale = 3.0 / width

    def do_row(r):
        y = row_start + r
        ci = (y - height / 2 + 0.5) * scale
        base = r * width
        for x in range(width):
            cr = -0.5 + (x - width / 2 + 0.5) * scale
            zr = 0.0
            zi = 0.0
            count = 0
            while count < max_iter:
                zr, zi = zr * zr - zi * zi + cr, 2.0 * zr * zi + ci
                count += 1
                if zr * zr + zi * zi > 4.0:
                    break
            out[base + x] = count & 0xFF

    ctx.parallel_for(0, row_count, do_row)


class _Accumulator:
    def __init__(self):
        self.value = 0
        self._lock = threading.Lock()

    def add(self, v):
        with self._lock:
            self.value += v


def _fib_seq(n: int) -> int:
    a, b = 0, 1
    for _ in range(n):
        a, b = b, a + b
    return a


def _fib_task(group, n, acc):
    if n < FIB_TASK_CUTOFF:
        acc.add(_fib_seq(n))
        return
    group.spawn(_fib_task, group, n - 1, acc)
    group.spawn(_fib_task, group, n - 2, acc)


def fib_value(ctx, regions, scalars):
    # regions: result u64 (from); scalars: n u32. Recursive task
    # decomposition with a sequential cutoff below FIB_TASK_CUTOFF.
    (n,) = struct.unpack("<I", scalars)
    acc = _Accumulator()
    group = ctx.task_group()
    _fib_task(group, n, acc)
    group.wait()
    regions[0].cast("Q")[0] = acc.value


def align_scores(ctx, regions, scalars):
    # regions: scores f64 (from); scalars: start, count, work, all u32.
    # The two lookup tables arrive once as registered globals.
    start, count, work = struct.unpack("<III", scalars)
    out = regions[0].cast("d")
    t1 = ctx.global_region(data.ALIGN_TABLE_1).cast("d").tolist()
    t2 = ctx.global_region(data.ALIGN_TABLE_2).cast("d").tolist()

    def score_one(slot, i, work):
        acc = 0.0
        for j in range(work):
            acc = acc * 1.0000001 + t1[(i * 31 + j) % 4096] * t2[(i * 17 + j) % 4096]
        out[slot] = acc

    group = ctx.task_group()
    for g in range(count):
        group.spawn(score_one, g, start + g, work)
    group.wait()


def sparselu_factor(ctx, regions, scalars):
    # regions: dense sub-matrix f64 (tofrom); scalars: sub-matrix block
    # count, block size, global block offset, all u32.
    sub_blocks, block_size, offset = struct.unpack("<III", scalars)
    view = regions[0].cast("d")
    factor_blocked(view, sub_blocks, block_size, offset, ctx)


def factor_blocked(m, nblocks, bs, block_offset, ctx):
    """Blocked LU without pivoting, in place on a dense row-major view.

    Per step: factor the diagonal block, solve the row and column panels
    as tasks, then apply trailing updates as tasks. Absent blocks follow
    the global sparsity pattern; a trailing update into an absent block
    fills it in. Each task writes one distinct block, so results do not
    depend on the pool width.
    """
    n = nblocks * bs
    present = [[data.block_present(block_offset + i, block_offset + j)
                for j in range(nblocks)] for i in range(nblocks)]
    for kk in range(nblocks):
        diag = _load(m, n, kk, kk, bs)
        _lu0(diag, bs)
        _store(m, n, kk, kk, bs, diag)

        group = ctx.task_group()
        for jj in range(kk + 1, nblocks):
            if present[kk][jj]:
                group.spawn(_fwd_task, m, n, kk, jj, bs)
        for ii in range(kk + 1, nblocks):
            if present[ii][kk]:
                group.spawn(_bdiv_task, m, n, ii, kk, bs)
        group.wait()

        group = ctx.task_group()
        for ii in range(kk + 1, nblocks):
            if not present[ii][kk]:
                continue
            for jj in range(kk + 1, nblocks):
                if not present[kk][jj]:
                    continue
                present[ii][jj] = True  # fill-in; dense storage is already zero
                group.spawn(_bmod_task, m, n, ii, jj, kk, bs)
        group.wait()


def _load(m, n, bi, bj, bs):
    r0 = bi * bs
    c0 = bj * bs
    return [m[(r0 + r) * n + c0:(r0 + r) * n + c0 + bs].tolist() for r in range(bs)]


def _store(m, n, bi, bj, bs, block):
    r0 = bi * bs
    c0 = bj * bs
    for r in range(bs):
        m[(r0 + r) * n + c0:(r0 + r) * n + c0 + bs] = array("d", block[r])


def _lu0(a, bs):
    for k in range(bs):
        pivot = a[k][k]
        if pivot == 0.0:
            raise ZeroDivisionError("singular diagonal block in LU factorization")
        row_k = a[k]
        for i in range(k + 1, bs):
            row_i = a[i]
            row_i[k] /= pivot
            factor = row_i[k]
            for j in range(k + 1, bs):
                row_i[j] -= factor * row_k[j]


def _fwd_task(m, n, kk, jj, bs):
    # Row panel: A[kk][jj] <- L(kk,kk)^-1 * A[kk][jj]
    diag = _load(m, n, kk, kk, bs)
    blk = _load(m, n, kk, jj, bs)
    for k in range(bs):
        row_k = blk[k]
        for i in range(k + 1, bs):
            factor = diag[i][k]
            row_i = blk[i]
            for j in range(bs):
                row_i[j] -= factor * row_k[j]
    _store(m, n, kk, jj, bs, blk)


def _bdiv_task(m, n, ii, kk, bs):
    # Column panel: A[ii][kk] <- A[ii][kk] * U(kk,kk)^-1
    diag = _load(m, n, kk, kk, bs)
    blk = _load(m, n, ii, kk, bs)
    for i in range(bs):
        row_i = blk[i]
        for k in range(bs):
            row_i[k] /= diag[k][k]
            factor = row_i[k]
            diag_k = diag[k]
            for j in range(k + 1, bs):
                row_i[j] -= factor * diag_k[j]
    _store(m, n, ii, kk, bs, blk)


def _bmod_task(m, n, ii, jj, kk, bs):
    # Trailing update: A[ii][jj] -= A[ii][kk] * A[kk][jj]
    row = _load(m, n, ii, kk, bs)
    col = _load(m, n, kk, jj, bs)
    inner = _load(m, n, ii, jj, bs)
    for i in range(bs):
        row_i = row[i]
        inner_i = inner[i]
        for k in range(bs):
            factor = row_i[k]
            col_k = col[k]
            for j in range(bs):
                inner_i[j] -= factor * col_k[j]
    _store(m, n, ii, jj, bs, inner)
