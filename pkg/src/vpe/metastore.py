"""Durable store for per-node results, user feedback and task manifests.

Queries are answered from here, never from live modules; that keeps results
endurable and readable while the processing side is down. Each record class
lives in its own append-only log of length-prefixed JSON records with an
in-memory index rebuilt on start; a torn tail left by a crash is truncated.

Result writes are first-write-wins per (task_id, node_id), which is what
turns at-least-once redelivery into one stored result per node. Feedback is
append-only and must reference an existing result.

Runs in-process or as a TCP service (opcodes 1=save_result 2=query_results
3=save_feedback 4=export_feedback 5=save_task 6=get_task).
"""

from __future__ import annotations

import base64
import json
import os
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from vpe.errors import VpeError
from vpe.flowgraph import is_task_id, is_token
from vpe.netproto import JsonTcpClient, JsonTcpServer

OP_SAVE_RESULT = 1
OP_QUERY_RESULTS = 2
OP_SAVE_FEEDBACK = 3
OP_EXPORT_FEEDBACK = 4
OP_SAVE_TASK = 5
OP_GET_TASK = 6

DEFAULT_STORE_PORT = 7613

FEEDBACK_KINDS = ("SATISFACTION", "SELECTION", "REVISION")

_HEADER = struct.Struct(">I")


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass(frozen=True)
class ResultRecord:
    task_id: str
    node_id: int
    module_id: str
    datatype: str
    records: tuple[bytes, ...]
    created_at: int

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "node_id": self.node_id,
            "module_id": self.module_id,
            "datatype": self.datatype,
            "records": [base64.b64encode(r).decode("ascii") for r in self.records],
            "created_at": self.created_at,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ResultRecord":
        return cls(
            task_id=obj["task_id"],
            node_id=obj["node_id"],
            module_id=obj["module_id"],
            datatype=obj["datatype"],
            records=tuple(base64.b64decode(r) for r in obj["records"]),
            created_at=obj["created_at"],
        )


@dataclass(frozen=True)
class FeedbackRecord:
    feedback_id: str
    task_id: str
    node_id: int
    kind: str
    created_at: int
    satisfaction: int | None = None
    selected_record_indices: tuple[int, ...] | None = None
    revision: bytes | None = None

    def to_json(self) -> dict:
        obj = {
            "feedback_id": self.feedback_id,
            "task_id": self.task_id,
            "node_id": self.node_id,
            "kind": self.kind,
            "created_at": self.created_at,
        }
        if self.satisfaction is not None:
            obj["satisfaction"] = self.satisfaction
        if self.selected_record_indices is not None:
            obj["selected_record_indices"] = list(self.selected_record_indices)
        if self.revision is not None:
            obj["revision"] = base64.b64encode(self.revision).decode("ascii")
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "FeedbackRecord":
        indices = obj.get("selected_record_indices")
        revision = obj.get("revision")
        return cls(
            feedback_id=obj["feedback_id"],
            task_id=obj["task_id"],
            node_id=obj["node_id"],
            kind=obj["kind"],
            created_at=obj["created_at"],
            satisfaction=obj.get("satisfaction"),
            selected_record_indices=None if indices is None else tuple(indices),
            revision=None if revision is None else base64.b64decode(revision),
        )


class _RecordLog:
    """Append-only log of length-prefixed JSON objects, torn tail truncated."""

    def __init__(self, path: Path, fsync: bool):
        self.path = path
        self.fsync = fsync
        path.parent.mkdir(parents=True, exist_ok=True)
        self.entries: list[dict] = []
        self._recover()
        self._fh = open(path, "ab")

    def _recover(self) -> None:
        if not self.path.exists():
            self.path.touch()
            return
        data = self.path.read_bytes()
        pos = good_end = 0
        while pos + _HEADER.size <= len(data):
            (length,) = _HEADER.unpack_from(data, pos)
            end = pos + _HEADER.size + length
            if end > len(data):
                break
            try:
                self.entries.append(json.loads(data[pos + _HEADER.size : end].decode("utf-8")))
            except (UnicodeDecodeError, json.JSONDecodeError):
                break
            pos = good_end = end
        if good_end < len(data):
            with open(self.path, "r+b") as fh:
                fh.truncate(good_end)

    def append(self, obj: dict) -> None:
        data = json.dumps(obj, separators=(",", ":")).encode("utf-8")
        try:
            self._fh.write(_HEADER.pack(len(data)) + data)
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
        except OSError as e:
            raise VpeError("IO_FAIL", str(e))
        self.entries.append(obj)


class MetaStore:
    """File-backed store; all writes durable before the call returns."""

    def __init__(self, root: str | Path, fsync: bool = True):
        self.root = Path(root)
        self._lock = threading.RLock()
        self._results_log = _RecordLog(self.root / "results.log", fsync)
        self._feedback_log = _RecordLog(self.root / "feedback.log", fsync)
        self._tasks_log = _RecordLog(self.root / "tasks.log", fsync)
        self._results: dict[tuple[str, int], ResultRecord] = {}
        self._feedback: list[FeedbackRecord] = []
        self._tasks: dict[str, dict] = {}
        for obj in self._results_log.entries:
            record = ResultRecord.from_json(obj)
            self._results.setdefault((record.task_id, record.node_id), record)
        for obj in self._feedback_log.entries:
            self._feedback.append(FeedbackRecord.from_json(obj))
        for obj in self._tasks_log.entries:
            self._tasks.setdefault(obj["task_id"], obj)

    # -- results -- #

    def save_result(self, record: ResultRecord) -> str:
        self._check_result(record)
        with self._lock:
            key = (record.task_id, record.node_id)
            if key in self._results:
                return "DUPLICATE"
            self._results_log.append(record.to_json())
            self._results[key] = record
            return "STORED"

    def query_results(self, task_id: str, node_id: int | None = None) -> list[ResultRecord]:
        with self._lock:
            found = [
                r
                for (t, n), r in self._results.items()
                if t == task_id and (node_id is None or n == node_id)
            ]
        return sorted(found, key=lambda r: r.node_id)

    @staticmethod
    def _check_result(record: ResultRecord) -> None:
        if not is_task_id(record.task_id):
            raise VpeError("BAD_FIELD", f"task_id {record.task_id!r} is not a lowercase UUID")
        if not isinstance(record.node_id, int) or record.node_id < 0:
            raise VpeError("BAD_FIELD", f"node_id {record.node_id!r}")
        if not is_token(record.module_id) or not is_token(record.datatype):
            raise VpeError("BAD_FIELD", "module_id and datatype must be tokens")

    # -- feedback -- #

    def save_feedback(self, record: FeedbackRecord) -> str:
        self._check_feedback(record)
        with self._lock:
            result = self._results.get((record.task_id, record.node_id))
            if result is None:
                raise VpeError("NO_RESULT", f"no result for ({record.task_id}, {record.node_id})")
            if record.kind == "SELECTION":
                bad = [i for i in record.selected_record_indices if not 0 <= i < len(result.records)]
                if bad:
                    raise VpeError("BAD_INDEX", f"indices {bad} out of range 0..{len(result.records) - 1}")
            self._feedback_log.append(record.to_json())
            self._feedback.append(record)
        return "STORED"

    def export_feedback(
        self,
        module_id: str | None = None,
        kind: str | None = None,
        since: int | None = None,
    ) -> list[FeedbackRecord]:
        with self._lock:
            snapshot = list(self._feedback)
            results = dict(self._results)
        matched = []
        for f in snapshot:
            if kind is not None and f.kind != kind:
                continue
            if since is not None and f.created_at < since:
                continue
            if module_id is not None:
                result = results.get((f.task_id, f.node_id))
                if result is None or result.module_id != module_id:
                    continue
            matched.append(f)
        return sorted(matched, key=lambda f: f.created_at)

    @staticmethod
    def _check_feedback(record: FeedbackRecord) -> None:
        if record.kind not in FEEDBACK_KINDS:
            raise VpeError("BAD_KIND", f"kind {record.kind!r}")
        fields = {
            "SATISFACTION": record.satisfaction,
            "SELECTION": record.selected_record_indices,
            "REVISION": record.revision,
        }
        for kind, value in fields.items():
            if (value is not None) != (record.kind == kind):
                raise VpeError("BAD_KIND", f"kind {record.kind} requires exactly its own field; got {kind.lower()} mismatch")
        if record.kind == "SATISFACTION" and not (
            isinstance(record.satisfaction, int) and 1 <= record.satisfaction <= 5
        ):
            raise VpeError("BAD_FIELD", f"satisfaction {record.satisfaction!r} outside 1..5")
        if not is_task_id(record.feedback_id):
            raise VpeError("BAD_FIELD", f"feedback_id {record.feedback_id!r} is not a lowercase UUID")

    # -- task manifests (submitted graphs, for status derivation) -- #

    def save_task(self, task_id: str, graph_json: dict, created_at: int) -> str:
        if not is_task_id(task_id):
            raise VpeError("BAD_FIELD", f"task_id {task_id!r} is not a lowercase UUID")
        with self._lock:
            if task_id in self._tasks:
                return "DUPLICATE"
            obj = {"task_id": task_id, "graph": graph_json, "created_at": created_at}
            self._tasks_log.append(obj)
            self._tasks[task_id] = obj
        return "STORED"

    def get_task(self, task_id: str) -> dict | None:
        with self._lock:
            return self._tasks.get(task_id)


# --- TCP service and client ------------------------------------------------ #


class StoreServer:
    def __init__(self, store: MetaStore, host: str = "127.0.0.1", port: int = DEFAULT_STORE_PORT):
        self.store = store
        self.server = JsonTcpServer(host, port, self._handle)
        self.port = self.server.port

    def start(self) -> "StoreServer":
        self.server.start()
        return self

    def run(self) -> None:
        self.server.run()

    def stop(self) -> None:
        self.server.stop()

    def _handle(self, opcode: int, body: dict) -> dict:
        if opcode == OP_SAVE_RESULT:
            return {"status": self.store.save_result(ResultRecord.from_json(body["record"]))}
        if opcode == OP_QUERY_RESULTS:
            results = self.store.query_results(body["task_id"], body.get("node_id"))
            return {"results": [r.to_json() for r in results]}
        if opcode == OP_SAVE_FEEDBACK:
            return {"status": self.store.save_feedback(FeedbackRecord.from_json(body["record"]))}
        if opcode == OP_EXPORT_FEEDBACK:
            feedback = self.store.export_feedback(
                body.get("module_id"), body.get("kind"), body.get("since")
            )
            return {"feedback": [f.to_json() for f in feedback]}
        if opcode == OP_SAVE_TASK:
            return {
                "status": self.store.save_task(body["task_id"], body["graph"], body["created_at"])
            }
        if opcode == OP_GET_TASK:
            task = self.store.get_task(body["task_id"])
            return {"found": task is not None, "task": task}
        raise VpeError("BAD_OPCODE", f"unknown opcode {opcode}")


class StoreClient:
    """TCP client mirroring the in-process MetaStore surface."""

    def __init__(self, addr: str, timeout: float = 30.0):
        self._rpc = JsonTcpClient(addr, timeout=timeout)

    def save_result(self, record: ResultRecord) -> str:
        return self._rpc.request(OP_SAVE_RESULT, {"record": record.to_json()})["status"]

    def query_results(self, task_id: str, node_id: int | None = None) -> list[ResultRecord]:
        body: dict = {"task_id": task_id}
        if node_id is not None:
            body["node_id"] = node_id
        response = self._rpc.request(OP_QUERY_RESULTS, body)
        return [ResultRecord.from_json(r) for r in response["results"]]

    def save_feedback(self, record: FeedbackRecord) -> str:
        return self._rpc.request(OP_SAVE_FEEDBACK, {"record": record.to_json()})["status"]

    def export_feedback(
        self,
        module_id: str | None = None,
        kind: str | None = None,
        since: int | None = None,
    ) -> list[FeedbackRecord]:
        body = {k: v for k, v in (("module_id", module_id), ("kind", kind), ("since", since)) if v is not None}
        response = self._rpc.request(OP_EXPORT_FEEDBACK, body)
        return [FeedbackRecord.from_json(f) for f in response["feedback"]]

    def save_task(self, task_id: str, graph_json: dict, created_at: int) -> str:
        body = {"task_id": task_id, "graph": graph_json, "created_at": created_at}
        return self._rpc.request(OP_SAVE_TASK, body)["status"]

    def get_task(self, task_id: str) -> dict | None:
        response = self._rpc.request(OP_GET_TASK, {"task_id": task_id})
        return response["task"] if response["found"] else None

    def close(self) -> None:
        self._rpc.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(data_dir: str, host: str = "127.0.0.1", port: int = DEFAULT_STORE_PORT, fsync: bool = True) -> None:
    """Run the store service in the foreground until interrupted."""
    server = StoreServer(MetaStore(data_dir, fsync=fsync), host, port)
    print(f"vpe store listening on {server.server.host}:{server.port}, data in {data_dir}", flush=True)
    server.run()
