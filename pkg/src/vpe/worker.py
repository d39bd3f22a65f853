"""Entry point for one module process.

Reads a key=value config file, builds the module host and runs until
SIGTERM, which triggers a graceful stop: in-flight work finishes, offsets
commit, then the process exits. Crash injection is armed by dropping a
fault.arm file (containing the point name) into the module's data directory,
or by setting VPE_FAULT_POINT in the environment before startup.

Config keys: module_id, datatypes (comma-separated), processor_id,
bus (host:port), store (host:port), registry (path to registry JSON),
data_dir; optional instance_count, ttl_ms.
"""

from __future__ import annotations

import argparse
import os
import signal
import sys
import threading
from pathlib import Path

from vpe.errors import VpeError
from vpe.runtime import (
    DEFAULT_TTL_MS,
    FAULT_ARM_FILE,
    FAULT_POINTS,
    FaultPlan,
    ModuleDescriptor,
    ModuleHost,
    Registry,
)

REQUIRED_KEYS = ("module_id", "datatypes", "processor_id", "bus", "store", "registry", "data_dir")


def parse_config(path: str | Path) -> dict[str, str]:
    config: dict[str, str] = {}
    try:
        text = Path(path).read_text("utf-8")
    except OSError as e:
        raise VpeError("IO_FAIL", f"cannot read config {path}: {e}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VpeError("BAD_CONFIG", f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        config[key.strip()] = value.strip()
    missing = [k for k in REQUIRED_KEYS if k not in config]
    if missing:
        raise VpeError("BAD_CONFIG", f"{path}: missing keys {missing}")
    return config


def host_from_config(config: dict[str, str]) -> ModuleHost:
    registry = Registry.load(config["registry"])
    descriptor = ModuleDescriptor(
        module_id=config["module_id"],
        input_datatypes=frozenset(d.strip() for d in config["datatypes"].split(",") if d.strip()),
        processor_id=config["processor_id"],
        instance_count=int(config.get("instance_count", "1")),
    )
    registered = registry.get(descriptor.module_id)
    if registered != descriptor:
        raise VpeError(
            "BAD_CONFIG",
            f"config for {descriptor.module_id!r} disagrees with the registry entry",
        )
    return ModuleHost(
        descriptor,
        registry,
        bus_addr=config["bus"],
        store_addr=config["store"],
        data_dir=config["data_dir"],
        ttl_ms=int(config.get("ttl_ms", str(DEFAULT_TTL_MS))),
        fault=FaultPlan(config["data_dir"]),
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="vpe-worker", description="Run one module process.")
    parser.add_argument("config", help="path to a key=value module config file")
    args = parser.parse_args(argv)

    env_point = os.environ.get("VPE_FAULT_POINT")
    if env_point and env_point not in FAULT_POINTS:
        print(f"error: BAD_POINT: VPE_FAULT_POINT must be one of {list(FAULT_POINTS)}", file=sys.stderr)
        return 2

    try:
        config = parse_config(args.config)
        host = host_from_config(config)
    except VpeError as e:
        print(f"error: {e.code}: {e.detail}", file=sys.stderr)
        return 2

    if env_point:
        arm_file = Path(config["data_dir"]) / FAULT_ARM_FILE
        if not arm_file.exists():
            arm_file.write_text(env_point, "utf-8")

    stopping = threading.Event()
    signal.signal(signal.SIGTERM, lambda signum, frame: stopping.set())
    signal.signal(signal.SIGINT, lambda signum, frame: stopping.set())

    host.start()
    print(f"module {config['module_id']} running, pid {os.getpid()}", flush=True)
    stopping.wait()
    host.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
