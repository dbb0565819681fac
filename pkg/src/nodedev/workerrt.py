"""Worker-side runtime: the command loop and in-kernel parallelism.

A worker process owns one DeviceTable and serves commands strictly one
at a time. Kernels themselves may fan work out onto a fixed thread pool
through the ExecutionContext they receive, either as a contiguous-chunk
parallel loop or as fork-join task groups.
"""

from __future__ import annotations

import math
import os
import socket
import struct
import sys
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor, wait as futures_wait

from . import wire
from .errors import (
    MalformedPayloadError,
    ProtocolError,
    StreamClosedError,
    TransportError,
    TruncatedStreamError,
)
from .medtable import DeviceTable
from .registry import KernelTable
from .wire import CommandTag


def default_pool_width() -> int:
    """Threads per device: NODEDEV_THREADS if set, else the core count."""
    env = os.environ.get("NODEDEV_THREADS")
    if env:
        width = int(env)
        if width < 1:
            raise ValueError(f"NODEDEV_THREADS must be positive, got {width}")
        return width
    return os.cpu_count() or 1


class TaskGroup:
    """Fork-join group over a shared pool.

    Tasks may spawn further tasks into the same group; wait() returns
    only after every transitively spawned task has finished, then
    re-raises the first recorded failure. Tasks must not block on the
    pool themselves (no nested wait from inside a task).
    """

    def __init__(self, pool: ThreadPoolExecutor):
        self._pool = pool
        self._cond = threading.Condition()
        self._outstanding = 0
        self._failure: BaseException | None = None

    def spawn(self, fn, *args) -> None:
        with self._cond:
            self._outstanding += 1
        self._pool.submit(self._run, fn, args)

    def _run(self, fn, args) -> None:
        try:
            fn(*args)
        except BaseException as exc:  # noqa: BLE001 - reported via wait()
            with self._cond:
                if self._failure is None:
                    self._failure = exc
        finally:
            with self._cond:
                self._outstanding -= 1
                if self._outstanding == 0:
                    self._cond.notify_all()

    def wait(self) -> None:
        with self._cond:
            while self._outstanding:
                self._cond.wait()
            failure = self._failure
            self._failure = None
        if failure is not None:
            raise failure


class ExecutionContext:
    """What a kernel gets to work with on its device."""

    def __init__(self, device_index: int, width: int | None = None,
                 globals_map: dict[str, memoryview] | None = None):
        self.device_index = device_index
        self.width = width if width is not None else default_pool_width()
        self.scalars = b""
        self._globals = dict(globals_map or {})
        self._pool = ThreadPoolExecutor(
            max_workers=self.width, thread_name_prefix=f"dev{device_index}")

    def global_region(self, name: str) -> memoryview:
        """Resolve a registered global by name (stable for the whole run)."""
        try:
            return self._globals[name]
        except KeyError:
            raise KeyError(f"unknown global {name!r}") from None

    def parallel_for(self, lo: int, hi: int, body) -> None:
        """Run body(i) exactly once for each i in [lo, hi).

        Iterations are split into at most `width` contiguous chunks
        (static schedule), so writes to per-index output slots are
        deterministic. Raises the first chunk failure after every chunk
        has stopped.
        """
        if lo > hi:
            raise ValueError(f"parallel_for range is reversed: [{lo}, {hi})")
        n = hi - lo
        if n == 0:
            return
        chunk = math.ceil(n / self.width)
        futures = []
        for start in range(lo, hi, chunk):
            end = min(start + chunk, hi)
            futures.append(self._pool.submit(self._run_range, start, end, body))
        futures_wait(futures)
        for fut in futures:
            exc = fut.exception()
            if exc is not None:
                raise exc

    @staticmethod
    def _run_range(start: int, end: int, body) -> None:
        for i in range(start, end):
            body(i)

    def task_group(self) -> TaskGroup:
        return TaskGroup(self._pool)

    def close(self) -> None:
        self._pool.shutdown(wait=True)


def command_loop(conn: wire.Connection, table: DeviceTable,
                 kernels: KernelTable, ctx: ExecutionContext) -> int:
    """Serve commands until Shutdown (returns 0) or connection loss (1).

    Commands are processed strictly sequentially; a malformed frame or a
    table violation gets an Err reply and the loop keeps going.
    """
    while True:
        try:
            tag, payload = conn.recv()
        except (StreamClosedError, TruncatedStreamError, TransportError):
            return 1
        except ProtocolError as exc:
            # frame-level defect (unknown tag, bad magic); the frame was
            # consumed where possible, so keep serving
            try:
                conn.send(CommandTag.ERR,
                          wire.pack_err(wire.ERR_MALFORMED, str(exc)))
            except TransportError:
                return 1
            continue
        if tag == CommandTag.SHUTDOWN:
            return 0
        try:
            reply_tag, reply_payload = _dispatch(tag, payload, table, kernels, ctx)
        except MalformedPayloadError as exc:
            reply_tag, reply_payload = CommandTag.ERR, wire.pack_err(
                wire.ERR_MALFORMED, str(exc))
        except ProtocolError as exc:
            reply_tag, reply_payload = CommandTag.ERR, wire.pack_err(
                wire.ERR_TABLE, str(exc))
        except (ValueError, struct.error) as exc:
            reply_tag, reply_payload = CommandTag.ERR, wire.pack_err(
                wire.ERR_MALFORMED, f"malformed {tag.name} command: {exc}")
        try:
            conn.send(reply_tag, reply_payload)
        except TransportError:
            return 1


def _dispatch(tag: CommandTag, payload: bytes, table: DeviceTable,
              kernels: KernelTable, ctx: ExecutionContext) -> tuple[CommandTag, bytes]:
    if tag == CommandTag.ALLOC:
        addr, nbytes = wire.unpack_alloc(payload)
        table.alloc(addr, nbytes)
        return CommandTag.ACK, wire.pack_status(0)

    if tag == CommandTag.FREE:
        table.free(wire.unpack_free(payload))
        return CommandTag.ACK, wire.pack_status(0)

    if tag == CommandTag.WRITE:
        addr, offset, data = wire.unpack_write(payload)
        region = table.resolve(addr)
        if offset + len(data) > len(region):
            raise ProtocolError(
                f"write of {len(data)} bytes at offset {offset} exceeds "
                f"region of {len(region)} bytes (addr {addr})")
        region[offset:offset + len(data)] = data
        return CommandTag.ACK, wire.pack_status(0)

    if tag == CommandTag.READ:
        addr, offset, length = wire.unpack_read(payload)
        region = table.resolve(addr)
        if offset + length > len(region):
            raise ProtocolError(
                f"read of {length} bytes at offset {offset} exceeds "
                f"region of {len(region)} bytes (addr {addr})")
        return CommandTag.DATA, bytes(region[offset:offset + length])

    if tag == CommandTag.EXEC:
        req = wire.unpack_exec(payload)
        fn = kernels.lookup_fn(req.kernel_index)
        regions = [table.resolve(a) for a in req.addrs]
        ctx.scalars = req.scalars
        try:
            fn(ctx, regions, req.scalars)
            status = 0
        except Exception:  # noqa: BLE001 - kernel failures become a status
            traceback.print_exc(file=sys.stderr)
            status = 1
        finally:
            ctx.scalars = b""
        return CommandTag.DONE, wire.pack_status(status)

    raise ProtocolError(f"command {tag.name} is not valid from the host")


def _connect(host: str, port: int, timeout: float = 15.0) -> socket.socket:
    deadline = time.monotonic() + timeout
    while True:
        try:
            return socket.create_connection((host, port), timeout=timeout)
        except OSError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.1)


def run_worker(device_index: int, host: str, port: int,
               kernels: KernelTable, globals_spec=()) -> int:
    """Worker process body: connect back, say Hello, serve commands.

    Returns the process exit status; 0 only after a clean Shutdown.
    """
    kernels.freeze()
    table = DeviceTable()
    table.register_globals(globals_spec)
    try:
        sock = _connect(host, port)
    except OSError as exc:
        print(f"device {device_index}: cannot reach host {host}:{port}: {exc}",
              file=sys.stderr)
        return 1
    sock.settimeout(None)  # devices wait indefinitely for commands
    conn = wire.Connection(sock)
    ctx = ExecutionContext(
        device_index,
        globals_map={name: table.resolve(i)
                     for i, name in enumerate(table.global_names)})
    try:
        conn.send(CommandTag.HELLO,
                  wire.pack_hello(kernels.digest(), table.n_globals, device_index))
        return command_loop(conn, table, kernels, ctx)
    except TransportError:
        return 1
    finally:
        ctx.close()
        conn.close()
