"""The kerneltable: a deterministic, order-sensitive kernel registry.

Every process (host and workers) registers the same kernels in the same
order before the bootstrap handshake; the entry index then serves as the
kernel's identity on the wire. The handshake compares table digests so a
divergent registration order fails loudly at startup instead of running
the wrong code.
"""

from __future__ import annotations

from typing import Callable

from . import wire
from .errors import ProtocolError

# A kernel receives (execution context, list of resolved regions, scalar bytes).
KernelFn = Callable[["object", list, bytes], None]


class KernelTable:
    def __init__(self):
        self._names: list[str] = []
        self._fns: list[KernelFn] = []
        self._index: dict[str, int] = {}
        self._frozen = False

    def __len__(self) -> int:
        return len(self._names)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        """Ends the registration phase; called by the bootstrap handshake."""
        self._frozen = True

    def register(self, name: str, fn: KernelFn) -> int:
        """Append a kernel and return its index (0-based)."""
        if self._frozen:
            raise RuntimeError(
                f"cannot register kernel {name!r} after the bootstrap handshake")
        if name in self._index:
            raise ValueError(f"kernel {name!r} is already registered")
        if not callable(fn):
            raise TypeError(f"kernel {name!r} is not callable")
        index = len(self._names)
        self._names.append(name)
        self._fns.append(fn)
        self._index[name] = index
        return index

    def lookup_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown kernel {name!r}") from None

    def lookup_fn(self, kernel_index: int) -> KernelFn:
        if not 0 <= kernel_index < len(self._fns):
            raise ProtocolError(
                f"kernel index {kernel_index} out of range "
                f"(table has {len(self._fns)} entries; tables diverged?)")
        return self._fns[kernel_index]

    def names(self) -> tuple[str, ...]:
        return tuple(self._names)

    def digest(self) -> int:
        return wire.kerneltable_digest(self._names)
