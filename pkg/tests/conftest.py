import sys
from pathlib import Path

import pytest

from nodedev import bootstrap, parse_config

PROGS_DIR = Path(__file__).parent / "progs"
TESTAPP = str(PROGS_DIR / "testapp.py")
TESTAPP_ARGV = [sys.executable, TESTAPP]
BENCH_ARGV = [sys.executable, "-m", "nodedev.bench"]

sys.path.insert(0, str(PROGS_DIR))

import testapp  # noqa: E402


def start_testapp_runtime(workers, timeout=15.0, **kwargs):
    """Runtime whose workers run tests/progs/testapp.py."""
    table, globals_spec = testapp.build()
    return bootstrap.start(
        parse_config(f"localhost {workers}" if workers else ""),
        table, globals_spec,
        program_argv=TESTAPP_ARGV, timeout=timeout, **kwargs)


def start_bench_runtime(workers, timeout=30.0, **kwargs):
    """Runtime whose workers run the nodedev-bench CLI in worker mode."""
    from nodedev.bench.kernels import build_kernel_table

    table, globals_spec = build_kernel_table()
    return bootstrap.start(
        parse_config(f"localhost {workers}" if workers else ""),
        table, globals_spec,
        program_argv=BENCH_ARGV, timeout=timeout, **kwargs)


@pytest.fixture
def testapp_runtime_2():
    rt = start_testapp_runtime(2)
    yield rt
    rt.shutdown()


@pytest.fixture
def testapp_runtime_4():
    rt = start_testapp_runtime(4)
    yield rt
    rt.shutdown()
