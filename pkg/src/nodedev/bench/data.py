"""Deterministic benchmark inputs.

Everything here is input data, generated identically wherever it is
needed (host, workers, oracles) from a fixed 64-bit LCG, so runs are
reproducible bit for bit.
"""

from __future__ import annotations

import functools
import struct
from array import array

_LCG_MUL = 6364136223846793005
_LCG_INC = 1442695040888963407
_MASK64 = (1 << 64) - 1
_TWO64 = float(1 << 64)

ALIGN_TABLE_LEN = 4096
ALIGN_TABLE_1 = "align_table_1"
ALIGN_TABLE_2 = "align_table_2"


def lcg_doubles(seed: int, count: int) -> list[float]:
    """`count` doubles in [0, 1): advance the LCG state, then scale."""
    x = seed & _MASK64
    out = []
    for _ in range(count):
        x = (x * _LCG_MUL + _LCG_INC) & _MASK64
        out.append(x / _TWO64)
    return out


@functools.lru_cache(maxsize=None)
def align_tables() -> tuple[tuple[float, ...], tuple[float, ...]]:
    """The two read-only lookup tables broadcast once as globals."""
    return (tuple(lcg_doubles(1, ALIGN_TABLE_LEN)),
            tuple(lcg_doubles(2, ALIGN_TABLE_LEN)))


def align_globals_spec() -> list[tuple[str, int, bytes]]:
    t1, t2 = align_tables()
    nbytes = 8 * ALIGN_TABLE_LEN
    return [
        (ALIGN_TABLE_1, nbytes, struct.pack(f"<{ALIGN_TABLE_LEN}d", *t1)),
        (ALIGN_TABLE_2, nbytes, struct.pack(f"<{ALIGN_TABLE_LEN}d", *t2)),
    ]


@functools.lru_cache(maxsize=8)
def vec_pair(n: int) -> tuple[array, array]:
    """Input vectors for the array-addition benchmark (seeds 3 and 4)."""
    return array("d", lcg_doubles(3, n)), array("d", lcg_doubles(4, n))


def block_present(i: int, j: int) -> bool:
    """Sparsity pattern of the block matrix, in global block coordinates."""
    return i == j or (i + j) % 3 == 0


def block_values(i: int, j: int, block_size: int) -> list[float]:
    """Row-major entries of block (i, j); diagonal blocks are made dominant."""
    vals = lcg_doubles(i * 65536 + j, block_size * block_size)
    if i == j:
        for t in range(block_size):
            vals[t * block_size + t] += float(block_size)
    return vals


def dense_submatrix(blocks: int, block_size: int, k: int, which: int) -> array:
    """Dense row-major copy of diagonal sub-matrix `which` of a k-way split.

    The blocks-by-blocks block matrix is cut into k equal square diagonal
    sub-matrices; absent blocks are zero.
    """
    if blocks % k:
        raise ValueError(f"{blocks} blocks cannot be split over {k} devices")
    sub_blocks = blocks // k
    offset = which * sub_blocks
    n = sub_blocks * block_size
    dense = array("d", bytes(8 * n * n))
    for bi in range(sub_blocks):
        for bj in range(sub_blocks):
            gi, gj = offset + bi, offset + bj
            if not block_present(gi, gj):
                continue
            vals = block_values(gi, gj, block_size)
            for r in range(block_size):
                row = (bi * block_size + r) * n + bj * block_size
                dense[row:row + block_size] = array(
                    "d", vals[r * block_size:(r + 1) * block_size])
    return dense
