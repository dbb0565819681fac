import struct
import sys
import time
from array import array

import pytest

import nodedev
from nodedev import (
    BootstrapError,
    ConfigError,
    DigestMismatchError,
    bootstrap,
    map_from,
    map_to,
    parse_config,
)

from conftest import TESTAPP_ARGV, start_testapp_runtime


class TestParseConfig:
    def test_multiplicity_expansion(self):
        config = parse_config("nodeA\nnodeB 3\n")
        assert [(n.host, n.multiplicity) for n in config.nodes] == \
            [("nodeA", 1), ("nodeB", 3)]
        assert config.device_count == 5
        assert config.expand() == ["nodeA", "nodeB", "nodeB", "nodeB"]

    def test_empty_config_is_host_only(self):
        config = parse_config("")
        assert config.nodes == ()
        assert config.device_count == 1

    def test_zero_multiplicity_rejected(self):
        with pytest.raises(ConfigError) as info:
            parse_config("nodeA 0")
        assert info.value.line_no == 1

    def test_negative_multiplicity_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("nodeA -2")

    def test_non_integer_multiplicity_rejected(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config("nodeA\nnodeB lots\n")

    def test_comments_and_blanks_skipped(self):
        config = parse_config("# cluster\n\nnodeA 2\n   \n# done\n")
        assert config.expand() == ["nodeA", "nodeA"]

    def test_too_many_fields_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("nodeA 2 extra")

    def test_numbering_is_deterministic(self):
        text = "a 2\nb\nc 3\n"
        assert parse_config(text).expand() == parse_config(text).expand()

    def test_load_config(self, tmp_path):
        path = tmp_path / "cluster.conf"
        path.write_text("localhost 2\n")
        assert bootstrap.load_config(str(path)).device_count == 3


class TestSpawn:
    def test_local_spawn_counts_and_clean_shutdown(self):
        rt = start_testapp_runtime(4)
        try:
            assert rt.device_count == 5
        finally:
            codes = rt.shutdown()
        assert codes == {1: 0, 2: 0, 3: 0, 4: 0}

    def test_workers_are_replicas_of_the_given_program(self):
        rt = start_testapp_runtime(2)
        try:
            args = [wp.proc.args for wp in rt._procs]
            assert all(a[:2] == TESTAPP_ARGV for a in args)
            assert args[0][:2] == args[1][:2]
        finally:
            rt.shutdown()

    def test_shutdown_is_idempotent(self):
        rt = start_testapp_runtime(1)
        first = rt.shutdown()
        second = rt.shutdown()
        assert first == second == {1: 0}

    def test_no_orphans_after_shutdown(self):
        rt = start_testapp_runtime(3)
        procs = [wp.proc for wp in rt._procs]
        rt.shutdown()
        assert all(p.poll() is not None for p in procs)

    def test_offload_roundtrip_through_spawned_worker(self):
        rt = start_testapp_runtime(1)
        try:
            a = array("d", [2.0, 4.0])
            b = array("d", [1.0, 1.0])
            c = array("d", [0.0, 0.0])
            rt.target_execute(1, "vecadd_f64",
                              [map_to(a, 8), map_to(b, 8), map_from(c, 8)],
                              struct.pack("<I", 2))
            assert list(c) == [3.0, 5.0]
        finally:
            rt.shutdown()

    def test_spawn_failure_names_device_and_host(self):
        table, globals_spec = __import__("testapp").build()
        with pytest.raises(BootstrapError, match=r"device 1 on 'localhost'"):
            bootstrap.start(parse_config("localhost"), table, globals_spec,
                            program_argv=["/does/not/exist"], timeout=5)

    def test_worker_that_never_connects_times_out(self):
        table, globals_spec = __import__("testapp").build()
        started = time.monotonic()
        with pytest.raises(BootstrapError, match="timed out.*1 \\(localhost\\)"):
            bootstrap.start(
                parse_config("localhost"), table, globals_spec,
                program_argv=[sys.executable, "-c", "import time; time.sleep(60)"],
                timeout=2)
        assert time.monotonic() - started < 10

    def test_worker_that_crashes_fails_fast(self):
        table, globals_spec = __import__("testapp").build()
        started = time.monotonic()
        with pytest.raises(BootstrapError, match="exited with status 3"):
            bootstrap.start(
                parse_config("localhost"), table, globals_spec,
                program_argv=[sys.executable, "-c", "raise SystemExit(3)"],
                timeout=20)
        assert time.monotonic() - started < 10

    def test_missing_program_argv(self):
        table, globals_spec = __import__("testapp").build()
        with pytest.raises(BootstrapError, match="worker program"):
            bootstrap.start(parse_config("localhost"), table, globals_spec)

    def test_launcher_template_formats_host_and_args(self):
        rt = start_testapp_runtime(1, launcher="sh -c 'exec {args}' ignored-{host}")
        try:
            assert rt.device_count == 2
            assert rt._procs[0].proc.args[:2] == ["sh", "-c"]
        finally:
            rt.shutdown()


class TestHandshake:
    def test_reordered_registration_aborts_with_digest_error(self):
        with pytest.raises(DigestMismatchError, match="kerneltable divergence"):
            start_testapp_runtime(2, extra_env={"TESTAPP_REORDER": "1"})

    def test_wrong_global_count_is_fatal(self):
        with pytest.raises(BootstrapError, match="globals"):
            start_testapp_runtime(1, extra_env={"TESTAPP_DROP_GLOBAL": "1"})

    def test_failed_bootstrap_leaves_no_processes(self):
        import psutil

        me = psutil.Process()
        with pytest.raises(DigestMismatchError):
            start_testapp_runtime(2, extra_env={"TESTAPP_REORDER": "1"})
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            children = [c for c in me.children(recursive=True)
                        if "testapp" in " ".join(c.cmdline())]
            if not children:
                break
            time.sleep(0.05)
        assert not children

    def test_check_hello_rules(self):
        from nodedev.bootstrap import _check_hello
        from nodedev.wire import Hello

        good = Hello(nodedev.wire.VERSION, 42, 1, 1)
        _check_hello(good, 42, 1, 2, {})
        with pytest.raises(BootstrapError, match="version"):
            _check_hello(good._replace(version=9), 42, 1, 2, {})
        with pytest.raises(DigestMismatchError):
            _check_hello(good._replace(digest=7), 42, 1, 2, {})
        with pytest.raises(BootstrapError, match="globals"):
            _check_hello(good._replace(global_count=0), 42, 1, 2, {})
        with pytest.raises(BootstrapError, match="range"):
            _check_hello(good._replace(device_index=3), 42, 1, 2, {})
        with pytest.raises(BootstrapError, match="twice"):
            _check_hello(good, 42, 1, 2, {1: object()})


def test_worker_main_flag_parsing_error():
    table = nodedev.KernelTable()
    with pytest.raises(SystemExit):
        nodedev.worker_main(["--worker"], table)


def test_reply_timeout_env_override(monkeypatch):
    monkeypatch.setenv("NODEDEV_TIMEOUT_SECS", "2.5")
    assert bootstrap.reply_timeout() == 2.5
    monkeypatch.delenv("NODEDEV_TIMEOUT_SECS")
    assert bootstrap.reply_timeout() == bootstrap.DEFAULT_TIMEOUT
