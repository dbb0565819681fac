"""Mediary address tables.

A mediary address is a plain array index that stands in for a device
buffer the host cannot (and need not) name directly. Each worker owns a
DeviceTable that maps indices to real buffers; the host keeps a
HostMirror per device that tracks which indices are in use, so it can
pick the next address without asking the device first.

Registered globals occupy indices 0..G-1 on every node, in registration
order, and are never freed.
"""

from __future__ import annotations

import enum
from typing import Iterable

from .errors import ProtocolError

_MIN_CAPACITY = 8


def _normalize_globals(globals_spec: Iterable) -> list[tuple[str, int, bytes | None]]:
    out = []
    for entry in globals_spec:
        if len(entry) == 2:
            name, nbytes = entry
            init = None
        else:
            name, nbytes, init = entry
        if nbytes < 0:
            raise ValueError(f"global {name!r} has negative size")
        if init is not None and len(init) != nbytes:
            raise ValueError(
                f"global {name!r}: initial bytes ({len(init)}) do not match size {nbytes}")
        out.append((name, nbytes, init))
    return out


class DeviceTable:
    """Worker-side allocation table: index -> zero-initialized buffer.

    The host dictates indices; the table only checks that they were not
    already occupied (a mismatch means host and device state diverged).
    Confined to the worker's command loop, so no locking here.
    """

    def __init__(self):
        self._slots: list[bytearray | None] = []
        self._n_globals = 0
        self._global_names: tuple[str, ...] = ()
        self._globals_registered = False

    @property
    def n_globals(self) -> int:
        return self._n_globals

    @property
    def global_names(self) -> tuple[str, ...]:
        return self._global_names

    @property
    def capacity(self) -> int:
        return len(self._slots)

    def register_globals(self, globals_spec: Iterable) -> None:
        """Install the registered globals at indices 0..G-1. Call once, first."""
        if self._globals_registered:
            raise RuntimeError("globals already registered for this table")
        if self._slots:
            raise RuntimeError("globals must be registered before any allocation")
        spec = _normalize_globals(globals_spec)
        for name, nbytes, init in spec:
            buf = bytearray(nbytes)
            if init is not None:
                buf[:] = init
            self._slots.append(buf)
        self._n_globals = len(spec)
        self._global_names = tuple(name for name, _, _ in spec)
        self._globals_registered = True

    def _grow_to(self, addr: int) -> None:
        need = addr + 1
        if need > len(self._slots):
            new_len = max(need, 2 * len(self._slots), _MIN_CAPACITY)
            self._slots.extend([None] * (new_len - len(self._slots)))

    def alloc(self, addr: int, nbytes: int) -> None:
        """Back slot addr with a fresh zero-filled buffer of nbytes."""
        if addr < 0:
            raise ProtocolError(f"negative mediary address {addr}")
        self._grow_to(addr)
        if self._slots[addr] is not None:
            raise ProtocolError(
                f"alloc at mediary address {addr} which is already allocated")
        self._slots[addr] = bytearray(nbytes)

    def free(self, addr: int) -> None:
        if addr < self._n_globals:
            raise ProtocolError(f"free of global mediary address {addr}")
        if addr >= len(self._slots) or self._slots[addr] is None:
            raise ProtocolError(f"free of unused mediary address {addr}")
        self._slots[addr] = None

    def resolve(self, addr: int) -> memoryview:
        """Return the buffer behind addr for kernel use."""
        if 0 <= addr < len(self._slots) and self._slots[addr] is not None:
            return memoryview(self._slots[addr])
        raise ProtocolError(f"resolve of unused mediary address {addr}")

    def is_allocated(self, addr: int) -> bool:
        return 0 <= addr < len(self._slots) and self._slots[addr] is not None

    def allocated_indices(self) -> set[int]:
        return {i for i, slot in enumerate(self._slots) if slot is not None}


class SlotState(enum.Enum):
    UNUSED = "unused"
    RESERVED = "reserved"
    IN_USE = "in-use"


class HostMirror:
    """Host-side state mirror of one device's table.

    Reserving marks the lowest unused index so the host knows the
    address the device will use before the Alloc round trip completes.
    Reserved is transient: commit on the device's Ack, release if the
    allocation failed or when the slot is freed.

    All mutation must happen under the owning device's guard; the mirror
    itself does no locking.
    """

    def __init__(self):
        self._states: list[SlotState] = []
        self._sizes: list[int] = []
        self._n_globals = 0
        self._globals_registered = False
        self._scan_from = 0  # no unused index below this point

    @property
    def n_globals(self) -> int:
        return self._n_globals

    @property
    def capacity(self) -> int:
        return len(self._states)

    def register_globals(self, globals_spec: Iterable) -> None:
        if self._globals_registered:
            raise RuntimeError("globals already registered for this mirror")
        if self._states:
            raise RuntimeError("globals must be registered before any reservation")
        spec = _normalize_globals(globals_spec)
        for _, nbytes, _ in spec:
            self._states.append(SlotState.IN_USE)
            self._sizes.append(nbytes)
        self._n_globals = len(spec)
        self._globals_registered = True
        self._scan_from = self._n_globals

    def reserve(self, nbytes: int) -> int:
        """Mark the first unused slot Reserved and return its index."""
        for addr in range(self._scan_from, len(self._states)):
            if self._states[addr] is SlotState.UNUSED:
                self._states[addr] = SlotState.RESERVED
                self._sizes[addr] = nbytes
                self._scan_from = addr + 1
                return addr
        # No unused slot: double the table.
        addr = len(self._states)
        new_len = max(2 * addr, _MIN_CAPACITY)
        self._states.extend([SlotState.UNUSED] * (new_len - addr))
        self._sizes.extend([0] * (new_len - addr))
        self._states[addr] = SlotState.RESERVED
        self._sizes[addr] = nbytes
        self._scan_from = addr + 1
        return addr

    def commit(self, addr: int) -> None:
        if self.state(addr) is not SlotState.RESERVED:
            raise RuntimeError(f"commit of slot {addr} which is not reserved")
        self._states[addr] = SlotState.IN_USE

    def release(self, addr: int) -> None:
        if addr < self._n_globals:
            raise RuntimeError(f"release of global slot {addr}")
        if self.state(addr) is SlotState.UNUSED:
            raise RuntimeError(f"release of slot {addr} which is already unused")
        self._states[addr] = SlotState.UNUSED
        self._scan_from = min(self._scan_from, addr)

    def state(self, addr: int) -> SlotState:
        if 0 <= addr < len(self._states):
            return self._states[addr]
        return SlotState.UNUSED

    def nbytes(self, addr: int) -> int:
        if self.state(addr) is SlotState.UNUSED:
            raise RuntimeError(f"slot {addr} is unused")
        return self._sizes[addr]

    def in_use_indices(self) -> set[int]:
        return {i for i, s in enumerate(self._states) if s is SlotState.IN_USE}

    def reserved_indices(self) -> set[int]:
        return {i for i, s in enumerate(self._states) if s is SlotState.RESERVED}
