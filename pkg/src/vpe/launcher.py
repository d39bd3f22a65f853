"""Launch service: starts and stops module processes on demand.

Each launch spawns an independent OS process running one module; any subset
of modules may be live at a time, and messages for absent modules simply
accumulate in the broker until the module is (re)launched. A monitor thread
can relaunch modules that die unexpectedly, which keeps pipelines draining
through crash-injection runs.

Wire protocol: the shared frame protocol with opcodes 1=launch 2=terminate
3=list 4=fault. Port from VPE_LAUNCHER_PORT (default 7612).
"""

from __future__ import annotations

import signal
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path

from vpe.errors import VpeError
from vpe.netproto import JsonTcpClient, JsonTcpServer
from vpe.runtime import FAULT_ARM_FILE, FAULT_POINTS, Registry

OP_LAUNCH = 1
OP_TERMINATE = 2
OP_LIST = 3
OP_FAULT = 4

DEFAULT_LAUNCHER_PORT = 7612
TERMINATE_DEADLINE_MS = 5000


@dataclass
class _Child:
    module_id: str
    process: subprocess.Popen
    data_dir: Path
    auto_restart: bool
    restarts: int = 0
    stopping: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock)


class Launcher:
    """Owns the worker subprocesses for one deployment."""

    def __init__(self, registry_path: str | Path, bus_addr: str, store_addr: str, run_dir: str | Path):
        self.registry_path = Path(registry_path)
        self.registry = Registry.load(registry_path)
        self.bus_addr = bus_addr
        self.store_addr = store_addr
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._children: dict[str, _Child] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._monitor = threading.Thread(target=self._watch, daemon=True, name="launcher-monitor")
        self._monitor.start()

    # -- operations -- #

    def launch(self, module_id: str, auto_restart: bool = False) -> dict:
        descriptor = self.registry.get(module_id)
        with self._lock:
            child = self._children.get(module_id)
            if child is not None and child.process.poll() is None:
                raise VpeError("ALREADY_RUNNING", f"module {module_id!r} is running (pid {child.process.pid})")
            data_dir = self.run_dir / module_id
            data_dir.mkdir(parents=True, exist_ok=True)
            config_path = data_dir / "module.conf"
            config_path.write_text(
                "".join(
                    f"{k}={v}\n"
                    for k, v in (
                        ("module_id", descriptor.module_id),
                        ("datatypes", ",".join(sorted(descriptor.input_datatypes))),
                        ("processor_id", descriptor.processor_id),
                        ("instance_count", descriptor.instance_count),
                        ("bus", self.bus_addr),
                        ("store", self.store_addr),
                        ("registry", self.registry_path),
                        ("data_dir", data_dir),
                    )
                ),
                "utf-8",
            )
            process = self._spawn(config_path, data_dir)
            self._children[module_id] = _Child(
                module_id=module_id,
                process=process,
                data_dir=data_dir,
                auto_restart=auto_restart,
                restarts=child.restarts if child else 0,
            )
            return {"module_id": module_id, "pid": process.pid}

    def _spawn(self, config_path: Path, data_dir: Path) -> subprocess.Popen:
        with open(data_dir / "module.log", "ab") as log:
            return subprocess.Popen(
                [sys.executable, "-m", "vpe.worker", str(config_path)],
                stdout=log,
                stderr=subprocess.STDOUT,
            )

    def terminate(self, module_id: str, deadline_ms: int = TERMINATE_DEADLINE_MS) -> dict:
        with self._lock:
            child = self._children.get(module_id)
            if child is None or child.process.poll() is not None:
                raise VpeError("NOT_RUNNING", f"module {module_id!r} is not running")
            child.stopping = True
        child.process.terminate()
        try:
            child.process.wait(timeout=deadline_ms / 1000)
            forced = False
        except subprocess.TimeoutExpired:
            child.process.kill()
            child.process.wait()
            forced = True
        with self._lock:
            self._children.pop(module_id, None)
        return {"module_id": module_id, "forced": forced}

    def list_modules(self) -> list[dict]:
        out = []
        with self._lock:
            children = dict(self._children)
        for descriptor in self.registry.modules():
            child = children.get(descriptor.module_id)
            running = child is not None and child.process.poll() is None
            out.append(
                {
                    "module_id": descriptor.module_id,
                    "processor_id": descriptor.processor_id,
                    "input_datatypes": sorted(descriptor.input_datatypes),
                    "running": running,
                    "pid": child.process.pid if running else None,
                    "restarts": child.restarts if child else 0,
                }
            )
        return out

    def fault(self, module_id: str, point: str) -> dict:
        """Kill a live module now, or arm a one-shot crash at a pipeline point."""
        if point != "now" and point not in FAULT_POINTS:
            raise VpeError("BAD_POINT", f"point must be 'now' or one of {list(FAULT_POINTS)}")
        with self._lock:
            child = self._children.get(module_id)
            if child is None or child.process.poll() is not None:
                raise VpeError("NOT_RUNNING", f"module {module_id!r} is not running")
            if point == "now":
                child.process.send_signal(signal.SIGKILL)
            else:
                (child.data_dir / FAULT_ARM_FILE).write_text(point, "utf-8")
        return {"module_id": module_id, "point": point}

    def shutdown(self) -> None:
        self._stop.set()
        with self._lock:
            children = list(self._children.values())
            self._children.clear()
        for child in children:
            if child.process.poll() is None:
                child.process.terminate()
        for child in children:
            try:
                child.process.wait(timeout=5)
            except subprocess.TimeoutExpired:
                child.process.kill()

    # -- crash monitor -- #

    def _watch(self) -> None:
        while not self._stop.wait(0.1):
            with self._lock:
                dead = [
                    c
                    for c in self._children.values()
                    if not c.stopping and c.process.poll() is not None and c.auto_restart
                ]
            for child in dead:
                try:
                    config_path = child.data_dir / "module.conf"
                    process = self._spawn(config_path, child.data_dir)
                    with self._lock:
                        current = self._children.get(child.module_id)
                        if current is child:
                            child.process = process
                            child.restarts += 1
                except OSError:
                    pass


class LauncherServer:
    def __init__(self, launcher: Launcher, host: str = "127.0.0.1", port: int = DEFAULT_LAUNCHER_PORT):
        self.launcher = launcher
        self.server = JsonTcpServer(host, port, self._handle)
        self.port = self.server.port

    def start(self) -> "LauncherServer":
        self.server.start()
        return self

    def run(self) -> None:
        try:
            self.server.run()
        finally:
            self.launcher.shutdown()

    def stop(self) -> None:
        self.server.stop()
        self.launcher.shutdown()

    def _handle(self, opcode: int, body: dict) -> dict:
        if opcode == OP_LAUNCH:
            return self.launcher.launch(body["module_id"], bool(body.get("auto_restart", False)))
        if opcode == OP_TERMINATE:
            return self.launcher.terminate(
                body["module_id"], int(body.get("deadline_ms", TERMINATE_DEADLINE_MS))
            )
        if opcode == OP_LIST:
            return {"modules": self.launcher.list_modules()}
        if opcode == OP_FAULT:
            return self.launcher.fault(body["module_id"], body["point"])
        raise VpeError("BAD_OPCODE", f"unknown opcode {opcode}")


class LauncherClient:
    def __init__(self, addr: str, timeout: float = 30.0):
        self._rpc = JsonTcpClient(addr, timeout=timeout)

    def launch(self, module_id: str, auto_restart: bool = False) -> dict:
        return self._rpc.request(OP_LAUNCH, {"module_id": module_id, "auto_restart": auto_restart})

    def terminate(self, module_id: str, deadline_ms: int = TERMINATE_DEADLINE_MS) -> dict:
        return self._rpc.request(OP_TERMINATE, {"module_id": module_id, "deadline_ms": deadline_ms})

    def list_modules(self) -> list[dict]:
        return self._rpc.request(OP_LIST, {})["modules"]

    def fault(self, module_id: str, point: str) -> dict:
        return self._rpc.request(OP_FAULT, {"module_id": module_id, "point": point})

    def close(self) -> None:
        self._rpc.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(
    registry_path: str,
    bus_addr: str,
    store_addr: str,
    run_dir: str,
    host: str = "127.0.0.1",
    port: int = DEFAULT_LAUNCHER_PORT,
) -> None:
    """Run the launcher service in the foreground until interrupted."""
    launcher = Launcher(registry_path, bus_addr, store_addr, run_dir)
    server = LauncherServer(launcher, host, port)
    print(f"vpe launcher listening on {server.server.host}:{server.port}", flush=True)
    server.run()
