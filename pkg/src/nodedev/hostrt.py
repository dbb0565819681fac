"""Host-side runtime: device handles, map processing, target execution.

One offload ("target region") processes its map entries in declaration
order: reserve a mirror slot and Alloc on the device for each, Write the
host bytes of to/tofrom entries, then Exec. Completion (wait) receives
the Done, Reads back from/tofrom entries, Frees every slot and releases
the mirror, so after wait the mirror holds only the registered globals.

Device 0 is the host itself. It has no connection; offloads to it run
in-process against a private DeviceTable with full copy semantics, so it
is observationally identical to a remote device.

All wire traffic and all mirror mutation for a device happen under that
device's exclusive guard. With nowait, the guard is dropped right after
Exec is sent and the device owes one Done; whoever touches the device
next (the owner's wait, or another thread's offload) drains that Done
and runs the post-transfers exactly once.
"""

from __future__ import annotations

import enum
import logging
import subprocess
import threading
from dataclasses import dataclass, field

from . import wire
from .errors import (
    OffloadError,
    ProtocolError,
    StreamClosedError,
    TransportError,
    TruncatedStreamError,
)
from .medtable import DeviceTable, HostMirror
from .registry import KernelTable
from .wire import CommandTag
from .workerrt import ExecutionContext

log = logging.getLogger(__name__)

_REAP_TIMEOUT = 5.0

# What a dead or unresponsive worker looks like from the host side.
_CONNECTION_FAILURES = (TransportError, StreamClosedError, TruncatedStreamError)


class MapType(enum.Enum):
    TO = "to"
    FROM = "from"
    TOFROM = "tofrom"
    ALLOC = "alloc"

    @property
    def sends_data(self) -> bool:
        return self in (MapType.TO, MapType.TOFROM)

    @property
    def receives_data(self) -> bool:
        return self in (MapType.FROM, MapType.TOFROM)


class MapEntry:
    """One variable's transfer descriptor.

    `offset` and `count` are in elements of `elem_size` bytes, so a map
    of an array section [offset:count] moves elem_size*count bytes
    starting elem_size*offset bytes into the host region. The device
    allocates exactly the section, never the whole array.
    """

    def __init__(self, map_type: MapType, host_region=None, elem_size: int = 1,
                 offset: int = 0, count: int | None = None):
        if elem_size < 1:
            raise ValueError(f"elem_size must be positive, got {elem_size}")
        if offset < 0:
            raise ValueError(f"offset must be non-negative, got {offset}")
        self.map_type = map_type
        self.elem_size = elem_size
        self.offset = offset
        if host_region is None:
            if map_type is not MapType.ALLOC:
                raise ValueError(f"{map_type.value} map requires a host region")
            if count is None:
                raise ValueError("alloc map without a region needs an explicit count")
            self._view = None
            self.count = count
        else:
            view = memoryview(host_region).cast("B")
            if map_type.receives_data and view.readonly:
                raise ValueError(
                    f"{map_type.value} map requires a writable host region")
            if count is None:
                total = len(view) // elem_size
                count = total - offset
            if count < 0:
                raise ValueError(f"count must be non-negative, got {count}")
            end = elem_size * (offset + count)
            if end > len(view):
                raise ValueError(
                    f"section [{offset}:{count}] x {elem_size} bytes overruns "
                    f"host region of {len(view)} bytes")
            self._view = view
            self.count = count

    @property
    def nbytes(self) -> int:
        return self.elem_size * self.count

    def read_section(self) -> bytes:
        start = self.elem_size * self.offset
        return bytes(self._view[start:start + self.nbytes])

    def write_section(self, data: bytes) -> None:
        if len(data) != self.nbytes:
            raise ProtocolError(
                f"device returned {len(data)} bytes for a section of {self.nbytes}")
        start = self.elem_size * self.offset
        self._view[start:start + self.nbytes] = data


def map_to(region, elem_size: int = 1, offset: int = 0, count: int | None = None) -> MapEntry:
    return MapEntry(MapType.TO, region, elem_size, offset, count)


def map_from(region, elem_size: int = 1, offset: int = 0, count: int | None = None) -> MapEntry:
    return MapEntry(MapType.FROM, region, elem_size, offset, count)


def map_tofrom(region, elem_size: int = 1, offset: int = 0, count: int | None = None) -> MapEntry:
    return MapEntry(MapType.TOFROM, region, elem_size, offset, count)


def map_alloc(region_or_nbytes, elem_size: int = 1, offset: int = 0,
              count: int | None = None) -> MapEntry:
    if isinstance(region_or_nbytes, int):
        return MapEntry(MapType.ALLOC, None, 1, 0, region_or_nbytes)
    return MapEntry(MapType.ALLOC, region_or_nbytes, elem_size, offset, count)


_INFLIGHT = "in-flight"
_DONE = "done"
_COLLECTED = "collected"


class PendingOffload:
    """Handle for one offload. wait() finalizes it exactly once."""

    def __init__(self, device, maps: list[MapEntry], kernel_name: str):
        self.device_index = device.index
        self.kernel_name = kernel_name
        self._device = device
        self._maps = maps
        self._addrs: list[int] = []
        self._state = _INFLIGHT
        self._status: int | None = None
        self._kernel_status: int | None = None  # local devices only
        self._error: Exception | None = None
        self._detail = ""
        self._thread: threading.Thread | None = None  # local devices only

    @property
    def status(self) -> int | None:
        """Kernel status once known (0 = ok), without collecting the handle."""
        return self._status

    def wait(self) -> int:
        """Finalize the offload: post-transfers, frees, status check.

        Raises OffloadError for a nonzero kernel status, TransportError if
        the device died, and RuntimeError when called twice.
        """
        dev = self._device
        if self._thread is not None:
            self._thread.join()
        with dev.guard:
            if self._state == _INFLIGHT:
                dev.finalize_locked(self)
            if self._state == _COLLECTED:
                raise RuntimeError("wait() called twice on the same offload")
            self._state = _COLLECTED
        if self._error is not None:
            raise self._error
        if self._status != 0:
            raise OffloadError(self.device_index, self._status, self._detail)
        return 0


def wait_all(pendings) -> None:
    """Wait every handle even if one fails, then re-raise the first failure."""
    first: Exception | None = None
    for pending in pendings:
        try:
            pending.wait()
        except Exception as exc:  # noqa: BLE001 - re-raised below
            if first is None:
                first = exc
    if first is not None:
        raise first


class _RemoteDevice:
    """A worker process behind a connection."""

    def __init__(self, index: int, connection: wire.Connection, globals_spec=()):
        self.index = index
        self.connection = connection
        self.mirror = HostMirror()
        self.mirror.register_globals(globals_spec)
        self.guard = threading.Lock()
        self._owed: PendingOffload | None = None
        self._alive = True

    @property
    def is_local(self) -> bool:
        return False

    def _check_alive(self) -> None:
        if not self._alive:
            raise TransportError(f"connection to device {self.index} is dead")

    def _poison(self, exc: Exception) -> None:
        self._alive = False
        if self._owed is not None:
            owed = self._owed
            self._owed = None
            owed._error = TransportError(
                f"device {self.index} connection failed while this offload "
                f"was in flight: {exc}")
            owed._state = _DONE

    def _request(self, tag: CommandTag, payload: bytes) -> tuple[CommandTag, bytes]:
        try:
            reply_tag, reply = self.connection.request(tag, payload)
        except _CONNECTION_FAILURES as exc:
            self._poison(exc)
            raise TransportError(f"device {self.index}: {exc}") from exc
        if reply_tag == CommandTag.ERR:
            code, message = wire.unpack_err(reply)
            raise ProtocolError(f"device {self.index} rejected {tag.name}: {message}")
        if reply_tag != wire.REPLY_TAG[tag]:
            raise ProtocolError(
                f"device {self.index} answered {tag.name} with {reply_tag.name}")
        return reply_tag, reply

    def start(self, kernel_index: int, kernel_name: str, maps: list[MapEntry],
              scalars: bytes, nowait: bool) -> PendingOffload:
        pending = PendingOffload(self, maps, kernel_name)
        with self.guard:
            if self._owed is not None:
                self.finalize_locked(self._owed)
            self._check_alive()
            addrs: list[int] = []
            try:
                for entry in maps:
                    addr = self.mirror.reserve(entry.nbytes)
                    try:
                        self._request(CommandTag.ALLOC,
                                      wire.pack_alloc(addr, entry.nbytes))
                    except Exception:
                        self.mirror.release(addr)
                        raise
                    self.mirror.commit(addr)
                    addrs.append(addr)
                for entry, addr in zip(maps, addrs):
                    if entry.map_type.sends_data and entry.nbytes:
                        self._request(CommandTag.WRITE,
                                      wire.pack_write(addr, 0, entry.read_section()))
                pending._addrs = addrs
                try:
                    self.connection.send_request(
                        CommandTag.EXEC, wire.pack_exec(kernel_index, addrs, scalars))
                except TransportError as exc:
                    self._poison(exc)
                    raise TransportError(f"device {self.index}: {exc}") from exc
            except TransportError:
                raise
            except Exception:
                self._rollback(addrs)
                raise
            self._owed = pending
        return pending

    def _rollback(self, addrs: list[int]) -> None:
        # Undo committed allocations after a setup failure, so mirror and
        # device table stay in lockstep. Best effort: a transport failure
        # here poisons the device anyway.
        for addr in addrs:
            try:
                self._request(CommandTag.FREE, wire.pack_free(addr))
                self.mirror.release(addr)
            except (TransportError, ProtocolError):
                break

    def finalize_locked(self, pending: PendingOffload) -> None:
        """Drain the owed Done and run post-transfers. Guard must be held."""
        if self._owed is not pending:
            raise RuntimeError("offload is not the one owed by its device")
        self._owed = None
        try:
            reply_tag, reply = self.connection.recv_reply()
        except _CONNECTION_FAILURES as exc:
            self._poison(exc)
            pending._error = TransportError(f"device {self.index}: {exc}")
            pending._state = _DONE
            return
        if reply_tag == CommandTag.ERR:
            code, message = wire.unpack_err(reply)
            pending._error = ProtocolError(
                f"device {self.index} rejected EXEC: {message}")
            try:
                self._cleanup_slots(pending)
            except (TransportError, ProtocolError):
                pass  # original rejection is the error that matters
            pending._state = _DONE
            return
        if reply_tag != CommandTag.DONE:
            self._poison(ProtocolError(f"expected DONE, got {reply_tag.name}"))
            pending._error = ProtocolError(
                f"device {self.index} answered EXEC with {reply_tag.name}")
            pending._state = _DONE
            return
        status = wire.unpack_status(reply)
        try:
            if status == 0:
                for entry, addr in zip(pending._maps, pending._addrs):
                    if entry.map_type.receives_data and entry.nbytes:
                        _, data = self._request(
                            CommandTag.READ, wire.pack_read(addr, 0, entry.nbytes))
                        entry.write_section(data)
            self._cleanup_slots(pending)
        except (TransportError, ProtocolError) as exc:
            pending._error = exc
            pending._state = _DONE
            return
        pending._status = status
        pending._state = _DONE

    def _cleanup_slots(self, pending: PendingOffload) -> None:
        for addr in pending._addrs:
            self._request(CommandTag.FREE, wire.pack_free(addr))
            self.mirror.release(addr)
        pending._addrs = []

    def shutdown_locked(self) -> None:
        try:
            self.connection.send(CommandTag.SHUTDOWN)
        except TransportError:
            log.warning("device %d was already unreachable at shutdown", self.index)
        self._alive = False
        self.connection.close()


class _LocalDevice:
    """Device 0: the host machine itself, with copy semantics.

    Runs the same reserve/alloc/write/exec/read/free sequence as a remote
    device, just against an in-process DeviceTable, so kernels see
    staging buffers and the host variables change only at wait time.
    """

    def __init__(self, kernels: KernelTable, globals_spec=()):
        self.index = 0
        self.connection = None
        self.mirror = HostMirror()
        self.mirror.register_globals(globals_spec)
        self.table = DeviceTable()
        self.table.register_globals(globals_spec)
        self.guard = threading.Lock()
        self._kernels = kernels
        self.ctx = ExecutionContext(
            0, globals_map={name: self.table.resolve(i)
                            for i, name in enumerate(self.table.global_names)})

    @property
    def is_local(self) -> bool:
        return True

    def start(self, kernel_index: int, kernel_name: str, maps: list[MapEntry],
              scalars: bytes, nowait: bool) -> PendingOffload:
        pending = PendingOffload(self, maps, kernel_name)

        def run() -> None:
            with self.guard:
                addrs: list[int] = []
                try:
                    for entry in maps:
                        addr = self.mirror.reserve(entry.nbytes)
                        self.table.alloc(addr, entry.nbytes)
                        self.mirror.commit(addr)
                        addrs.append(addr)
                    for entry, addr in zip(maps, addrs):
                        if entry.map_type.sends_data and entry.nbytes:
                            region = self.table.resolve(addr)
                            region[:entry.nbytes] = entry.read_section()
                    pending._addrs = addrs
                except Exception as exc:  # table misuse is a host bug
                    for addr in addrs:
                        self.table.free(addr)
                        self.mirror.release(addr)
                    pending._error = exc
                    return
                fn = self._kernels.lookup_fn(kernel_index)
                regions = [self.table.resolve(a) for a in addrs]
                self.ctx.scalars = scalars
                try:
                    fn(self.ctx, regions, scalars)
                    pending._kernel_status = 0
                except Exception as exc:  # noqa: BLE001 - becomes a status
                    pending._kernel_status = 1
                    pending._detail = repr(exc)
                finally:
                    self.ctx.scalars = b""

        if nowait:
            thread = threading.Thread(
                target=run, name=f"offload-dev0-{kernel_name}", daemon=True)
            pending._thread = thread
            thread.start()
        else:
            run()
        return pending

    def finalize_locked(self, pending: PendingOffload) -> None:
        if pending._error is not None:
            pending._state = _DONE
            return
        status = pending._kernel_status
        if status == 0:
            for entry, addr in zip(pending._maps, pending._addrs):
                if entry.map_type.receives_data and entry.nbytes:
                    entry.write_section(bytes(self.table.resolve(addr)))
        for addr in pending._addrs:
            self.table.free(addr)
            self.mirror.release(addr)
        pending._addrs = []
        pending._status = status
        pending._state = _DONE

    def shutdown_locked(self) -> None:
        self.ctx.close()


@dataclass
class WorkerProc:
    device_index: int
    host: str
    proc: subprocess.Popen = field(repr=False)


class Runtime:
    """The set of devices an application offloads to, device 0 included.

    Shareable across host threads: per-device guards serialize all wire
    exchanges, and different devices can be driven fully concurrently.
    """

    def __init__(self, kernels: KernelTable, devices: list, procs=(),
                 timeout: float = 30.0):
        kernels.freeze()
        self.kernels = kernels
        self._devices = devices
        self._procs = list(procs)
        self.timeout = timeout
        self._shutdown_lock = threading.Lock()
        self._exit_codes: dict[int, int | None] | None = None

    @property
    def device_count(self) -> int:
        return len(self._devices)

    def device(self, index: int):
        return self._devices[index]

    def target_execute(self, device_index: int, kernel: str, maps,
                       scalars: bytes = b"", nowait: bool = False) -> PendingOffload:
        """Offload one target region to a device.

        With nowait the returned handle is in flight and must be waited;
        otherwise the call blocks until the region fully completed and
        any failure has been raised.
        """
        kernel_index = self.kernels.lookup_index(kernel)
        if not 0 <= device_index < len(self._devices):
            raise ValueError(
                f"device {device_index} does not exist "
                f"(runtime has {len(self._devices)} devices)")
        maps = list(maps)
        for entry in maps:
            if not isinstance(entry, MapEntry):
                raise TypeError(f"not a MapEntry: {entry!r}")
        device = self._devices[device_index]
        pending = device.start(kernel_index, kernel, maps, bytes(scalars), nowait)
        if not nowait:
            pending.wait()
        return pending

    def shutdown(self) -> dict[int, int | None]:
        """Stop every worker; idempotent. Returns exit codes by device index."""
        with self._shutdown_lock:
            if self._exit_codes is not None:
                return self._exit_codes
            for device in self._devices:
                with device.guard:
                    device.shutdown_locked()
            codes: dict[int, int | None] = {}
            for wp in self._procs:
                try:
                    codes[wp.device_index] = wp.proc.wait(timeout=_REAP_TIMEOUT)
                except subprocess.TimeoutExpired:
                    log.warning("device %d on %s did not exit after Shutdown; killing",
                                wp.device_index, wp.host)
                    wp.proc.kill()
                    codes[wp.device_index] = wp.proc.wait()
            self._exit_codes = codes
            return codes

    def __enter__(self) -> "Runtime":
        return self

    def __exit__(self, *exc_info) -> None:
        self.shutdown()
