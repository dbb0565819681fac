"""Offload kernels to cluster nodes presented as numbered compute devices.

The host (device 0) registers kernels once, spawns one worker process
per configured device, and offloads work with explicit data maps; each
worker runs a command loop over a mediary-addressed memory table and
executes kernels with its own thread pool.
"""

from .bootstrap import (
    ClusterConfig,
    NodeSpec,
    load_config,
    parse_config,
    start,
    worker_main,
)
from .errors import (
    BootstrapError,
    ConfigError,
    DigestMismatchError,
    NodedevError,
    OffloadError,
    ProtocolError,
    StreamClosedError,
    TransportError,
    TruncatedStreamError,
)
from .hostrt import (
    MapEntry,
    MapType,
    PendingOffload,
    Runtime,
    map_alloc,
    map_from,
    map_to,
    map_tofrom,
    wait_all,
)
from .medtable import DeviceTable, HostMirror, SlotState
from .registry import KernelTable
from .workerrt import ExecutionContext, default_pool_width, run_worker

__version__ = "0.1.0"

__all__ = [
    "BootstrapError",
    "ClusterConfig",
    "ConfigError",
    "DeviceTable",
    "DigestMismatchError",
    "ExecutionContext",
    "HostMirror",
    "KernelTable",
    "MapEntry",
    "MapType",
    "NodeSpec",
    "NodedevError",
    "OffloadError",
    "PendingOffload",
    "ProtocolError",
    "Runtime",
    "SlotState",
    "StreamClosedError",
    "TransportError",
    "TruncatedStreamError",
    "default_pool_width",
    "load_config",
    "map_alloc",
    "map_from",
    "map_to",
    "map_tofrom",
    "parse_config",
    "run_worker",
    "start",
    "wait_all",
    "worker_main",
]
