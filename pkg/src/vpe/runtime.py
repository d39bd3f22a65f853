"""Module host runtime: accumulation, execution, routing, and commits.

A module is an independent long-running process subscribed to one topic per
input datatype. Every message is a TaskData envelope naming the node it is
for; payloads for a multi-input node are cached until all predecessor nodes
have delivered, then the node's processor runs once over the merged inputs,
the result is persisted, and outputs are routed onward by topic name.

Delivery is at-least-once, so execution is made effectively-once by a durable
per-module ledger of (task_id, node_id) pairs: the ledger entry is written
after the processor runs but before outputs are published, and every
redelivered message for an already-ledgered node is retired without effect.
Offsets are only committed once every message that fed an execution is safe
to drop, tracked by a per-topic commit frontier.

Decode failures, misrouted messages and repeated processor failures go to the
module's dead-letter topic instead of wedging the consume loop.
"""

from __future__ import annotations

import base64
import json
import os
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from vpe.errors import VpeError
from vpe.flowgraph import (
    SOURCE_PRODUCER,
    FlowGraph,
    FlowNode,
    Payload,
    TaskData,
    decode_taskdata,
    encode_taskdata,
    is_token,
    locate_self,
    predecessors,
    successors,
)
from vpe.metastore import ResultRecord, StoreClient, now_ms
from vpe.msgbus import BusClient
from vpe.processors import ProcessorContract, get_processor, retag

DEFAULT_TTL_MS = 3_600_000
DEFAULT_MAX_ATTEMPTS = 5
FAULT_POINTS = ("after-poll", "after-execute", "after-publish")
FAULT_ARM_FILE = "fault.arm"


def input_topic_name(module_id: str, datatype: str) -> str:
    """The topic module_id owns for messages of the given datatype."""
    if not is_token(module_id) or not is_token(datatype):
        raise VpeError("BAD_NAME", f"({module_id!r}, {datatype!r}) are not valid tokens")
    return f"{module_id}-{datatype}"


def dead_letter_topic(module_id: str) -> str:
    return f"{module_id}-DeadLetter"


@dataclass(frozen=True)
class ModuleDescriptor:
    module_id: str
    input_datatypes: frozenset[str]
    processor_id: str
    instance_count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "input_datatypes", frozenset(self.input_datatypes))
        if not is_token(self.module_id):
            raise VpeError("BAD_NAME", f"module_id {self.module_id!r}")
        if not self.input_datatypes:
            raise VpeError("BAD_NAME", f"{self.module_id}: input_datatypes must be non-empty")
        if not all(is_token(d) for d in self.input_datatypes):
            raise VpeError("BAD_NAME", f"{self.module_id}: bad datatype token")
        if not is_token(self.processor_id):
            raise VpeError("BAD_NAME", f"{self.module_id}: bad processor_id")
        if self.instance_count < 1:
            raise VpeError("BAD_NAME", f"{self.module_id}: instance_count must be >= 1")

    def owned_topics(self) -> list[str]:
        return sorted(input_topic_name(self.module_id, d) for d in self.input_datatypes)

    def to_json(self) -> dict:
        return {
            "module_id": self.module_id,
            "input_datatypes": sorted(self.input_datatypes),
            "processor_id": self.processor_id,
            "instance_count": self.instance_count,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModuleDescriptor":
        return cls(
            module_id=obj["module_id"],
            input_datatypes=frozenset(obj["input_datatypes"]),
            processor_id=obj["processor_id"],
            instance_count=obj.get("instance_count", 1),
        )


class Registry:
    """All known module descriptors; enforces unique topic ownership."""

    def __init__(self, descriptors: list[ModuleDescriptor] | None = None):
        self._modules: dict[str, ModuleDescriptor] = {}
        self._topic_owner: dict[str, str] = {}
        for d in descriptors or []:
            self.register(d)

    def register(self, descriptor: ModuleDescriptor) -> None:
        if descriptor.module_id in self._modules:
            raise VpeError("TOPIC_COLLISION", f"module {descriptor.module_id!r} already registered")
        claimed = descriptor.owned_topics() + [dead_letter_topic(descriptor.module_id)]
        if len(set(claimed)) != len(claimed):
            raise VpeError(
                "TOPIC_COLLISION",
                f"module {descriptor.module_id!r} claims the same topic twice: {claimed}",
            )
        for topic in claimed:
            owner = self._topic_owner.get(topic)
            if owner is not None:
                raise VpeError(
                    "TOPIC_COLLISION",
                    f"topic {topic!r} claimed by both {owner!r} and {descriptor.module_id!r}",
                )
        self._modules[descriptor.module_id] = descriptor
        for topic in claimed:
            self._topic_owner[topic] = descriptor.module_id

    def get(self, module_id: str) -> ModuleDescriptor:
        try:
            return self._modules[module_id]
        except KeyError:
            raise VpeError("UNKNOWN_MODULE", f"module {module_id!r} not registered") from None

    def has(self, module_id: str) -> bool:
        return module_id in self._modules

    def modules(self) -> list[ModuleDescriptor]:
        return sorted(self._modules.values(), key=lambda d: d.module_id)

    def to_json(self) -> dict:
        return {"modules": [d.to_json() for d in self.modules()]}

    @classmethod
    def from_json(cls, obj: dict) -> "Registry":
        return cls([ModuleDescriptor.from_json(m) for m in obj["modules"]])

    @classmethod
    def load(cls, path: str | Path) -> "Registry":
        try:
            return cls.from_json(json.loads(Path(path).read_text("utf-8")))
        except FileNotFoundError:
            raise VpeError("IO_FAIL", f"registry file {path} not found") from None
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise VpeError("IO_FAIL", f"registry file {path} unreadable: {e}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", "utf-8")


# --- multi-input accumulation ----------------------------------------------- #


@dataclass
class AccumulatorEntry:
    task_id: str
    node_id: int
    required: frozenset[int]
    graph: FlowGraph
    first_arrival_time: int
    arrived: dict[int, Payload] = field(default_factory=dict)
    origins: list[tuple[str, int]] = field(default_factory=list)

    def ready(self) -> bool:
        have = set(self.arrived)
        return self.required <= have if self.required else bool(have)


class Accumulator:
    """Caches per-(task, node) payloads until every predecessor delivered."""

    def __init__(self):
        self._entries: dict[tuple[str, int], AccumulatorEntry] = {}
        self._lock = threading.Lock()
        self.adds = 0

    def add(self, td: TaskData, origin: tuple[str, int], now: int | None = None) -> AccumulatorEntry | None:
        """Cache td's payload; return the completed entry once READY, else None."""
        producer = td.payload.producer_node
        required = frozenset(predecessors(td.graph, td.nme))
        if producer != SOURCE_PRODUCER and producer not in required:
            raise VpeError(
                "BAD_PRODUCER",
                f"producer {producer} is not a predecessor of node {td.nme} (has {sorted(required)})",
            )
        key = (td.task_id, td.nme)
        with self._lock:
            self.adds += 1
            entry = self._entries.get(key)
            if entry is None:
                entry = AccumulatorEntry(
                    task_id=td.task_id,
                    node_id=td.nme,
                    required=required,
                    graph=td.graph,
                    first_arrival_time=now_ms() if now is None else now,
                )
                self._entries[key] = entry
            entry.arrived[producer] = td.payload
            entry.origins.append(origin)
            if entry.ready():
                del self._entries[key]
                return entry
            return None

    def sweep(self, ttl_ms: int, now: int | None = None) -> list[AccumulatorEntry]:
        """Evict entries older than ttl_ms; the caller reports them stalled."""
        now = now_ms() if now is None else now
        with self._lock:
            stale = [k for k, e in self._entries.items() if now - e.first_arrival_time > ttl_ms]
            return [self._entries.pop(k) for k in stale]

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


class ProcessingLedger:
    """Durable append-only set of executed (task_id, node_id) pairs."""

    def __init__(self, path: str | Path, fsync: bool = True):
        self.path = Path(path)
        self.fsync = fsync
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._done: set[tuple[str, int]] = set()
        self._lock = threading.Lock()
        if self.path.exists():
            for line in self.path.read_text("utf-8").splitlines():
                parts = line.split(" ")
                if len(parts) == 2 and parts[1].isdigit():
                    self._done.add((parts[0], int(parts[1])))
        self._fh = open(self.path, "a", encoding="utf-8")

    def contains(self, task_id: str, node_id: int) -> bool:
        with self._lock:
            return (task_id, node_id) in self._done

    def add(self, task_id: str, node_id: int) -> bool:
        """Record an execution; False if it was already recorded."""
        with self._lock:
            if (task_id, node_id) in self._done:
                return False
            self._fh.write(f"{task_id} {node_id}\n")
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
            self._done.add((task_id, node_id))
            return True

    def __len__(self) -> int:
        with self._lock:
            return len(self._done)


# --- execution and routing --------------------------------------------------- #


def execute_node(
    task_id: str,
    node: FlowNode,
    inputs: dict[int, Payload],
    processor: ProcessorContract,
    ledger: ProcessingLedger,
    after_execute=None,
) -> tuple[str, list[Payload]]:
    """Run the node's processor once; returns ("OK", outputs) or ("SKIP", []).

    The ledger entry lands after the processor runs but before outputs are
    released to the caller, so a crash before the ledger write redelivers and
    re-executes, while a duplicate delivery afterwards is retired as SKIP.
    """
    if ledger.contains(task_id, node.node_id):
        return ("SKIP", [])
    try:
        outputs = processor(dict(node.params), node.extra_data, inputs)
    except VpeError as e:
        raise VpeError("EXEC_FAIL", f"{processor.processor_id} on node {node.node_id}: {e.code}: {e.detail}") from e
    except Exception as e:
        raise VpeError("EXEC_FAIL", f"{processor.processor_id} on node {node.node_id}: {e!r}") from e
    undeclared = {p.datatype for p in outputs} - set(processor.produces)
    if undeclared:
        raise VpeError(
            "EXEC_FAIL",
            f"{processor.processor_id} emitted undeclared datatypes {sorted(undeclared)}",
        )
    outputs = retag(outputs, node.node_id)
    if after_execute is not None:
        after_execute()
    if not ledger.add(task_id, node.node_id):
        return ("SKIP", [])
    return ("OK", outputs)


def route_outputs(
    td: TaskData, executed_node: int, outputs: list[Payload], registry: Registry
) -> list[tuple[str, TaskData]]:
    """Address each output to every successor whose module accepts its datatype."""
    routed: list[tuple[str, TaskData]] = []
    for succ in sorted(successors(td.graph, executed_node)):
        node = td.graph.find_node(succ)
        descriptor = registry.get(node.module_id)
        matches = [p for p in outputs if p.datatype in descriptor.input_datatypes]
        if outputs and not matches:
            raise VpeError(
                "ROUTE_MISMATCH",
                f"successor node {succ} ({node.module_id}) accepts "
                f"{sorted(descriptor.input_datatypes)} but node {executed_node} produced "
                f"{sorted({p.datatype for p in outputs})}",
            )
        for payload in matches:
            topic = input_topic_name(node.module_id, payload.datatype)
            routed.append((topic, TaskData(td.task_id, succ, td.graph, payload)))
    return routed


# --- the module host --------------------------------------------------------- #


@dataclass
class _Work:
    entry: AccumulatorEntry
    node: FlowNode


class FaultPlan:
    """One-shot crash injection: a fault.arm file naming a pipeline point.

    When the host passes the named point it removes the file and SIGKILLs its
    own process, simulating a crash exactly there. Only meaningful inside a
    dedicated worker process.
    """

    def __init__(self, data_dir: str | Path):
        self.arm_path = Path(data_dir) / FAULT_ARM_FILE

    def __call__(self, point: str) -> None:
        try:
            armed = self.arm_path.read_text("utf-8").strip()
        except OSError:
            return
        if armed == point:
            try:
                self.arm_path.unlink()
            except OSError:
                pass
            os.kill(os.getpid(), 9)


class ModuleHost:
    """Consume loops, accumulator, executors and commit tracking for one module."""

    def __init__(
        self,
        descriptor: ModuleDescriptor,
        registry: Registry,
        bus_addr: str,
        store_addr: str,
        data_dir: str | Path,
        ttl_ms: int = DEFAULT_TTL_MS,
        poll_timeout_ms: int = 200,
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
        fault=None,
    ):
        registry.get(descriptor.module_id)  # must be registered, or routing to us breaks
        self.descriptor = descriptor
        self.registry = registry
        self.bus_addr = bus_addr
        self.store_addr = store_addr
        self.data_dir = Path(data_dir)
        self.ttl_ms = ttl_ms
        self.poll_timeout_ms = poll_timeout_ms
        self.max_attempts = max_attempts
        self.fault = fault or (lambda point: None)

        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.ledger = ProcessingLedger(self.data_dir / "ledger.log")
        self.accumulator = Accumulator()
        self.processor = get_processor(descriptor.processor_id)

        self._topic_datatype = {
            input_topic_name(descriptor.module_id, d): d for d in descriptor.input_datatypes
        }
        self._publisher = BusClient(bus_addr)
        self._store = StoreClient(store_addr)
        self._queue: queue.Queue[_Work] = queue.Queue()
        self._stop = threading.Event()
        self._reset = {t: threading.Event() for t in self._topic_datatype}
        self._threads: list[threading.Thread] = []
        self._frontier_lock = threading.Lock()
        self._committed: dict[str, int] = {}
        self._retired: dict[str, set[int]] = {t: set() for t in self._topic_datatype}
        self._attempts: dict[tuple[str, int], int] = {}
        self._consumers: dict[str, object] = {}

    # -- lifecycle -- #

    def start(self) -> "ModuleHost":
        for topic in list(self._topic_datatype) + [dead_letter_topic(self.descriptor.module_id)]:
            self._publisher.ensure_topic(topic)
        for topic in self._topic_datatype:
            t = threading.Thread(target=self._poll_loop, args=(topic,), daemon=True, name=f"poll-{topic}")
            self._threads.append(t)
        for i in range(self.descriptor.instance_count):
            t = threading.Thread(target=self._executor_loop, daemon=True, name=f"exec-{i}")
            self._threads.append(t)
        for t in self._threads:
            t.start()
        return self

    def stop(self, deadline_s: float = 10.0) -> None:
        """Graceful stop: drain in-flight work, commit, release connections."""
        self._stop.set()
        end = time.monotonic() + deadline_s
        for t in self._threads:
            t.join(timeout=max(0.0, end - time.monotonic()))
        for topic in self._topic_datatype:
            try:
                self._commit_ready(topic)
            except (VpeError, OSError):
                pass
        self._publisher.close()
        self._store.close()

    # -- consume side -- #

    def _subscribe(self, bus: BusClient, topic: str):
        consumer = bus.subscribe(topic, group=self.descriptor.module_id)
        with self._frontier_lock:
            self._committed[topic] = consumer.position
            self._retired[topic] = {o for o in self._retired[topic] if o >= consumer.position}
        self._consumers[topic] = consumer
        return consumer

    def _poll_loop(self, topic: str) -> None:
        bus = BusClient(self.bus_addr)
        consumer = None
        try:
            while not self._stop.is_set():
                try:
                    if consumer is None or self._reset[topic].is_set():
                        self._reset[topic].clear()
                        consumer = self._subscribe(bus, topic)
                    messages = consumer.poll(max_messages=64, timeout_ms=self.poll_timeout_ms)
                    if messages:
                        self.fault("after-poll")
                    for msg in messages:
                        self._handle(topic, msg)
                    self._commit_ready(topic)
                    for entry in self.accumulator.sweep(self.ttl_ms):
                        self._dead_letter(topic, "STALLED", f"node {entry.node_id} waited past ttl",
                                          task_id=entry.task_id, nme=entry.node_id)
                        self._retire_origins(entry.origins)
                except (VpeError, OSError):
                    # bus hiccup: back off, then resubscribe from the committed offset
                    consumer = None
                    if self._stop.wait(0.2):
                        return
        finally:
            bus.close()

    def _handle(self, topic: str, msg) -> None:
        try:
            td = decode_taskdata(msg.value)
        except VpeError as e:
            self._dead_letter(topic, e.code, e.detail, offset=msg.offset, value=msg.value)
            self._retire_origins([(topic, msg.offset)])
            return
        try:
            node = locate_self(td, self.descriptor.module_id)
            if td.payload.datatype != self._topic_datatype[topic]:
                raise VpeError(
                    "MISROUTED",
                    f"payload datatype {td.payload.datatype!r} on topic {topic!r}",
                )
        except VpeError as e:
            self._dead_letter(topic, e.code, e.detail, task_id=td.task_id, nme=td.nme,
                              offset=msg.offset, value=msg.value)
            self._retire_origins([(topic, msg.offset)])
            return
        if self.ledger.contains(td.task_id, td.nme):
            self._retire_origins([(topic, msg.offset)])
            return
        try:
            entry = self.accumulator.add(td, (topic, msg.offset))
        except VpeError as e:
            self._dead_letter(topic, e.code, e.detail, task_id=td.task_id, nme=td.nme,
                              offset=msg.offset, value=msg.value)
            self._retire_origins([(topic, msg.offset)])
            return
        if entry is not None:
            self._queue.put(_Work(entry=entry, node=node))

    # -- execute side -- #

    def _executor_loop(self) -> None:
        while True:
            try:
                work = self._queue.get(timeout=0.1)
            except queue.Empty:
                if self._stop.is_set():
                    return
                continue
            try:
                self._run_work(work)
            except Exception as e:
                # unexpected failure (store/bus outage): leave offsets uncommitted
                # and force a replay so the work is redelivered rather than lost
                print(f"[{self.descriptor.module_id}] executor error: {e}", flush=True)
                self.accumulator.clear()
                for event in self._reset.values():
                    event.set()

    def _run_work(self, work: _Work) -> None:
        entry, node = work.entry, work.node
        key = (entry.task_id, entry.node_id)
        try:
            status, outputs = execute_node(
                entry.task_id,
                node,
                dict(entry.arrived),
                self.processor,
                self.ledger,
                after_execute=lambda: self.fault("after-execute"),
            )
        except VpeError as e:
            self._attempts[key] = self._attempts.get(key, 0) + 1
            if self._attempts[key] >= self.max_attempts:
                self._dead_letter(None, e.code, e.detail, task_id=entry.task_id, nme=entry.node_id)
                self.ledger.add(entry.task_id, entry.node_id)
                self._retire_origins(entry.origins)
            else:
                # leave offsets uncommitted and replay them into the accumulator
                self.accumulator.clear()
                for event in self._reset.values():
                    event.set()
            return
        if status == "OK":
            self._persist(entry, outputs)
            routed = route_outputs(
                TaskData(entry.task_id, entry.node_id, entry.graph, entry.arrived[next(iter(entry.arrived))]),
                entry.node_id,
                outputs,
                self.registry,
            )
            for topic, td in routed:
                self._publisher.ensure_topic(topic)
                self._publisher.publish(topic, td.task_id, encode_taskdata(td))
            self.fault("after-publish")
        self._retire_origins(entry.origins)

    def _persist(self, entry: AccumulatorEntry, outputs: list[Payload]) -> None:
        datatype = outputs[0].datatype if outputs else sorted(self.processor.produces)[0]
        records = tuple(r for p in outputs for r in p.records)
        self._store.save_result(
            ResultRecord(
                task_id=entry.task_id,
                node_id=entry.node_id,
                module_id=self.descriptor.module_id,
                datatype=datatype,
                records=records,
                created_at=now_ms(),
            )
        )

    # -- commit frontier -- #

    def _retire_origins(self, origins: list[tuple[str, int]]) -> None:
        with self._frontier_lock:
            for topic, offset in origins:
                if offset >= self._committed.get(topic, 0):
                    self._retired[topic].add(offset)

    def _commit_ready(self, topic: str) -> None:
        with self._frontier_lock:
            frontier = self._committed.get(topic, 0)
            retired = self._retired[topic]
            advanced = frontier
            while advanced in retired:
                retired.discard(advanced)
                advanced += 1
            if advanced == frontier:
                return
            self._committed[topic] = advanced
        consumer = self._consumers.get(topic)
        if consumer is not None:
            consumer.commit(advanced)

    # -- dead letters -- #

    def _dead_letter(
        self,
        topic: str | None,
        code: str,
        detail: str,
        task_id: str | None = None,
        nme: int | None = None,
        offset: int | None = None,
        value: bytes | None = None,
    ) -> None:
        note = {"error": code, "detail": detail, "module": self.descriptor.module_id}
        if topic is not None:
            note["topic"] = topic
        if task_id is not None:
            note["task_id"] = task_id
        if nme is not None:
            note["nme"] = nme
        if offset is not None:
            note["offset"] = offset
        if value is not None:
            note["value_b64"] = base64.b64encode(value).decode("ascii")
        key = task_id if task_id is not None else str(uuid.uuid4())
        body = json.dumps(note, sort_keys=True, separators=(",", ":")).encode("utf-8")
        try:
            self._publisher.publish(dead_letter_topic(self.descriptor.module_id), key, body)
        except VpeError:
            print(f"[{self.descriptor.module_id}] dead-letter publish failed: {note}", flush=True)
