"""The nodedev-bench command line.

Host mode runs one benchmark over a list of device counts and reports a
CSV row per count. Worker mode (`--worker --device-index N --connect
HOST:PORT`) is what spawned processes run; it registers the identical
kernel table and serves commands until Shutdown.
"""

from __future__ import annotations

import argparse
import os
import sys

from .. import bootstrap
from ..errors import NodedevError
from ..workerrt import run_worker
from .kernels import build_kernel_table

WORKER_ARGV = [sys.executable, "-m", "nodedev.bench"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nodedev-bench",
        description="Run a benchmark distributed over the configured devices.")
    parser.add_argument("benchmark", nargs="?",
                        choices=["vecadd", "mandelbrot", "fib", "sparselu", "align"])
    parser.add_argument("--config", help="cluster config file "
                        "(default: $NODEDEV_CONFIG, else host only)")
    parser.add_argument("--devices", default="1",
                        help="comma separated device counts, e.g. 1,2,4")
    parser.add_argument("--repeats", type=int, default=10)
    parser.add_argument("--csv", help="write the report here instead of stdout")
    parser.add_argument("--launcher",
                        help="remote launch template with {host} and {args}, "
                        "e.g. 'ssh {host} {args}'; default is local subprocesses")
    # vecadd
    parser.add_argument("--n", type=int, default=1 << 20)
    # mandelbrot
    parser.add_argument("--size", default="512x512", help="WIDTHxHEIGHT")
    parser.add_argument("--max-iter", type=int, default=256)
    parser.add_argument("--out", help="dump the mandelbrot image (.pgm or raw)")
    # fib
    parser.add_argument("--fib-n", type=int, default=30)
    # sparselu
    parser.add_argument("--blocks", type=int, default=16)
    parser.add_argument("--block-size", type=int, default=8)
    # align
    parser.add_argument("--m", type=int, default=400)
    parser.add_argument("--work", type=int, default=10000)
    # worker mode
    parser.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    parser.add_argument("--device-index", type=int, help=argparse.SUPPRESS)
    parser.add_argument("--connect", help=argparse.SUPPRESS)
    return parser


def _params(args) -> dict:
    if args.benchmark == "vecadd":
        return {"n": args.n}
    if args.benchmark == "mandelbrot":
        try:
            width, height = (int(part) for part in args.size.lower().split("x"))
        except ValueError:
            raise SystemExit(f"--size wants WIDTHxHEIGHT, got {args.size!r}") from None
        return {"width": width, "height": height, "max_iter": args.max_iter}
    if args.benchmark == "fib":
        return {"n": args.fib_n}
    if args.benchmark == "sparselu":
        return {"blocks": args.blocks, "block_size": args.block_size}
    return {"m": args.m, "work": args.work}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    kernels, globals_spec = build_kernel_table()

    if args.worker:
        if args.device_index is None or not args.connect:
            raise SystemExit("--worker needs --device-index and --connect")
        host, _, port = args.connect.rpartition(":")
        return run_worker(args.device_index, host, int(port), kernels, globals_spec)

    if not args.benchmark:
        raise SystemExit("a benchmark name is required (or --worker)")

    # Host mode only below; keep worker startup free of these imports.
    from . import apps

    config_path = args.config or os.environ.get("NODEDEV_CONFIG")
    config = bootstrap.load_config(config_path) if config_path else bootstrap.ClusterConfig()
    try:
        ks = sorted({int(part) for part in args.devices.split(",")})
    except ValueError:
        raise SystemExit(f"--devices wants integers, got {args.devices!r}") from None

    params = _params(args)
    try:
        rt = bootstrap.start(config, kernels, globals_spec,
                             program_argv=WORKER_ARGV, launcher=args.launcher)
        with rt:
            reports = apps.run_report(rt, args.benchmark, params, ks, args.repeats)
            if args.out and args.benchmark == "mandelbrot":
                image = apps.run_mandelbrot(rt, params, ks[-1]).output
                apps.save_image(image, params["width"], params["height"], args.out)
    except (NodedevError, ValueError) as exc:
        print(f"nodedev-bench: {exc}", file=sys.stderr)
        return 2

    if args.csv:
        apps.write_csv(reports, args.csv)
    else:
        for row in apps.report_rows(reports):
            print(",".join(row))
    return 0 if all(r.valid for r in reports) else 1


if __name__ == "__main__":
    sys.exit(main())
