"""Benchmark applications and the nodedev-bench CLI.

Submodules:
    data       deterministic input generation (shared by runs and oracles)
    kernels    device-side kernels and the benchmark kernel table
    reference  independent single-process oracles used for validation
    apps       distributed drivers, timing, and CSV reporting
    cli        the nodedev-bench command line (host and worker modes)
"""
