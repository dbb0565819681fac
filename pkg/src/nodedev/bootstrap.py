"""Cluster config parsing, worker spawning, numbering, and handshake.

The config file is line oriented: each non-blank, non-comment line names
one node (hostname or IP), optionally followed by a positive integer D
to start D devices there. Devices are numbered 1..N in file order, each
line contributing D consecutive indices; the spawning process itself is
device 0.

Workers are replicas: they run the same program, register the same
kernels and globals, then dial back to the host and say Hello. The
handshake compares protocol version, kerneltable digest, and global
count, turning a silently divergent build into a startup failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import shlex
import socket
import subprocess
import time
from dataclasses import dataclass

from . import wire
from .errors import (
    BootstrapError,
    ConfigError,
    DigestMismatchError,
    ProtocolError,
    TransportError,
)
from .hostrt import Runtime, WorkerProc, _LocalDevice, _RemoteDevice
from .registry import KernelTable
from .wire import CommandTag
from .workerrt import run_worker

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0


def reply_timeout() -> float:
    env = os.environ.get("NODEDEV_TIMEOUT_SECS")
    return float(env) if env else DEFAULT_TIMEOUT


@dataclass(frozen=True)
class NodeSpec:
    host: str
    multiplicity: int = 1


@dataclass(frozen=True)
class ClusterConfig:
    nodes: tuple[NodeSpec, ...] = ()

    @property
    def device_count(self) -> int:
        """Total devices including device 0, the host."""
        return 1 + sum(node.multiplicity for node in self.nodes)

    def expand(self) -> list[str]:
        """Worker hostnames in device-index order (index 1 first)."""
        hosts = []
        for node in self.nodes:
            hosts.extend([node.host] * node.multiplicity)
        return hosts


def parse_config(text: str) -> ClusterConfig:
    """Parse config text; '#' lines are comments, blank lines ignored."""
    nodes = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) == 1:
            nodes.append(NodeSpec(parts[0]))
        elif len(parts) == 2:
            try:
                multiplicity = int(parts[1])
            except ValueError:
                raise ConfigError(
                    line_no, f"multiplicity {parts[1]!r} is not an integer") from None
            if multiplicity < 1:
                raise ConfigError(line_no, f"multiplicity must be >= 1, got {multiplicity}")
            nodes.append(NodeSpec(parts[0], multiplicity))
        else:
            raise ConfigError(line_no, f"expected 'host [multiplicity]', got {line!r}")
    return ClusterConfig(tuple(nodes))


def load_config(path: str) -> ClusterConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def worker_flags(device_index: int, endpoint: str) -> list[str]:
    return ["--worker", "--device-index", str(device_index), "--connect", endpoint]


def worker_main(argv, kernels: KernelTable, globals_spec=()) -> int:
    """Entry point for a program invoked in worker mode.

    Parses `--worker --device-index N --connect HOST:PORT` and serves
    commands until Shutdown. Returns the process exit status.
    """
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--worker", action="store_true", required=True)
    parser.add_argument("--device-index", type=int, required=True)
    parser.add_argument("--connect", required=True)
    args = parser.parse_args(argv)
    host, _, port = args.connect.rpartition(":")
    return run_worker(args.device_index, host, int(port), kernels, globals_spec)


def _check_hello(hello: wire.Hello, expected_digest: int, expected_globals: int,
                 n_workers: int, seen: dict) -> None:
    if hello.version != wire.VERSION:
        raise BootstrapError(
            f"device {hello.device_index} speaks protocol version "
            f"{hello.version}, host speaks {wire.VERSION}")
    if hello.digest != expected_digest:
        raise DigestMismatchError(
            f"kerneltable divergence: device {hello.device_index} has digest "
            f"{hello.digest:#018x}, host has {expected_digest:#018x}; "
            f"kernels were not registered identically")
    if hello.global_count != expected_globals:
        raise BootstrapError(
            f"device {hello.device_index} registered {hello.global_count} "
            f"globals, host registered {expected_globals}")
    if not 1 <= hello.device_index <= n_workers:
        raise BootstrapError(f"device index {hello.device_index} out of range 1..{n_workers}")
    if hello.device_index in seen:
        raise BootstrapError(f"device index {hello.device_index} connected twice")


def _spawn_one(device_index: int, host: str, program_argv: list[str],
               endpoint: str, launcher: str | None, env) -> subprocess.Popen:
    argv = list(program_argv) + worker_flags(device_index, endpoint)
    if launcher:
        cmd = shlex.split(launcher.format(host=host, args=shlex.join(argv)))
    else:
        cmd = argv
    try:
        return subprocess.Popen(cmd, env=env)
    except OSError as exc:
        raise BootstrapError(
            f"failed to spawn device {device_index} on {host!r}: {exc}") from exc


def start(config: ClusterConfig, kernels: KernelTable, globals_spec=(), *,
          program_argv: list[str] | None = None, launcher: str | None = None,
          bind_host: str = "127.0.0.1", timeout: float | None = None,
          record_transcripts: bool = False, extra_env: dict | None = None) -> Runtime:
    """Spawn the configured workers and hand back a ready Runtime.

    Local mode (no launcher) starts each worker as a subprocess of
    `program_argv`; with a launcher template, the formatted command
    (placeholders {host} and {args}) is run instead, e.g.
    ``"ssh {host} {args}"``. Workers connect back to bind_host, so for
    real remote nodes it must be an address they can reach.
    """
    if timeout is None:
        timeout = reply_timeout()
    kernels.freeze()
    globals_spec = list(globals_spec)
    hosts = config.expand()
    local = _LocalDevice(kernels, globals_spec)
    if not hosts:
        return Runtime(kernels, [local], [], timeout)
    if program_argv is None:
        raise BootstrapError(
            "config names worker nodes but no worker program was given")

    env = None
    if extra_env:
        env = dict(os.environ)
        env.update({k: str(v) for k, v in extra_env.items()})

    listener = socket.create_server((bind_host, 0), backlog=len(hosts))
    port = listener.getsockname()[1]
    endpoint = f"{bind_host}:{port}"
    procs: list[WorkerProc] = []
    conns: dict[int, wire.Connection] = {}
    try:
        for index, host in enumerate(hosts, start=1):
            proc = _spawn_one(index, host, program_argv, endpoint, launcher, env)
            procs.append(WorkerProc(index, host, proc))

        deadline = time.monotonic() + timeout
        expected_digest = kernels.digest()
        while len(conns) < len(hosts):
            for wp in procs:
                code = wp.proc.poll()
                if code is not None and wp.device_index not in conns:
                    raise BootstrapError(
                        f"device {wp.device_index} on {wp.host!r} exited with "
                        f"status {code} before the handshake")
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                missing = sorted(set(range(1, len(hosts) + 1)) - set(conns))
                names = ", ".join(f"{i} ({hosts[i - 1]})" for i in missing)
                raise BootstrapError(
                    f"timed out after {timeout:.1f}s waiting for devices: {names}")
            listener.settimeout(min(remaining, 0.2))
            try:
                sock, _ = listener.accept()
            except TimeoutError:
                continue
            conn = wire.Connection(sock, timeout=timeout, record=record_transcripts)
            try:
                tag, payload = conn.recv()
                if tag != CommandTag.HELLO:
                    raise ProtocolError(f"expected Hello, got {tag.name}")
                hello = wire.unpack_hello(payload)
            except (ProtocolError, TransportError) as exc:
                raise BootstrapError(f"handshake failed: {exc}") from exc
            _check_hello(hello, expected_digest, len(globals_spec), len(hosts), conns)
            conns[hello.device_index] = conn
    except BaseException:
        for conn in conns.values():
            conn.close()
        for wp in procs:
            if wp.proc.poll() is None:
                wp.proc.kill()
            wp.proc.wait()
        raise
    finally:
        listener.close()

    devices = [local] + [
        _RemoteDevice(index, conns[index], globals_spec)
        for index in range(1, len(hosts) + 1)
    ]
    return Runtime(kernels, devices, procs, timeout)
