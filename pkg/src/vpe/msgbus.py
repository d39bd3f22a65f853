"""Embedded durable publish-subscribe broker.

Topics are single-partition append-only logs with dense offsets from 0.
Consumer groups track a durable committed offset per topic; polling advances
only an in-memory position, so anything not committed is redelivered after a
crash (at-least-once). Messages are never deleted, so a dead module's backlog
stays fully replayable.

On disk, under the broker root:
  topics/<name>/log            length-prefixed records (4-byte big-endian
                               length, then 16-byte key + 8-byte big-endian
                               enqueue time in ms + value bytes)
  groups/<group>/<topic>.offset  committed next-offset, rewritten atomically

The broker runs in-process (tests, embedding) or as a TCP service speaking
the shared frame protocol: opcodes 1=create 2=publish 3=subscribe 4=poll
5=commit.
"""

from __future__ import annotations

import base64
import os
import struct
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

from vpe.errors import VpeError
from vpe.flowgraph import is_token
from vpe.netproto import JsonTcpClient, JsonTcpServer

OP_CREATE = 1
OP_PUBLISH = 2
OP_SUBSCRIBE = 3
OP_POLL = 4
OP_COMMIT = 5

DEFAULT_BUS_PORT = 7611

_HEADER = struct.Struct(">I")
_KEY_TIME = struct.Struct(">16sQ")


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass(frozen=True)
class BusMessage:
    offset: int
    key: str
    value: bytes
    enqueue_time: int


class _Topic:
    """One append-only log, fully mirrored in memory for cheap reads."""

    def __init__(self, path: Path, fsync: bool):
        self.path = path
        self.fsync = fsync
        self.cond = threading.Condition()
        self.messages: list[BusMessage] = []
        path.mkdir(parents=True, exist_ok=True)
        self._log_path = path / "log"
        self._recover()
        self._fh = open(self._log_path, "ab")

    def _recover(self) -> None:
        """Load the log; a torn tail (partial final record) is truncated."""
        if not self._log_path.exists():
            self._log_path.touch()
            return
        good_end = 0
        with open(self._log_path, "rb") as fh:
            data = fh.read()
        pos = 0
        while pos + _HEADER.size <= len(data):
            (length,) = _HEADER.unpack_from(data, pos)
            if length < _KEY_TIME.size or pos + _HEADER.size + length > len(data):
                break
            record = data[pos + _HEADER.size : pos + _HEADER.size + length]
            key_bytes, enqueue_ms = _KEY_TIME.unpack_from(record)
            self.messages.append(
                BusMessage(
                    offset=len(self.messages),
                    key=str(uuid.UUID(bytes=key_bytes)),
                    value=record[_KEY_TIME.size :],
                    enqueue_time=enqueue_ms,
                )
            )
            pos += _HEADER.size + length
            good_end = pos
        if good_end < len(data):
            with open(self._log_path, "r+b") as fh:
                fh.truncate(good_end)

    def append(self, key: str, value: bytes) -> int:
        try:
            key_bytes = uuid.UUID(key).bytes
        except (ValueError, AttributeError, TypeError):
            raise VpeError("BAD_KEY", f"message key {key!r} is not a UUID")
        enqueue_ms = now_ms()
        record = _KEY_TIME.pack(key_bytes, enqueue_ms) + value
        with self.cond:
            try:
                self._fh.write(_HEADER.pack(len(record)) + record)
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
            except OSError as e:
                raise VpeError("IO_FAIL", str(e))
            offset = len(self.messages)
            self.messages.append(BusMessage(offset, str(uuid.UUID(key)), value, enqueue_ms))
            self.cond.notify_all()
        return offset

    def read(self, position: int, max_messages: int, timeout_ms: int) -> list[BusMessage]:
        deadline = time.monotonic() + timeout_ms / 1000.0
        with self.cond:
            while len(self.messages) <= position:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return []
                self.cond.wait(remaining)
            return self.messages[position : position + max_messages]

    def __len__(self) -> int:
        with self.cond:
            return len(self.messages)


class Consumer:
    """A group member's cursor on one topic; poll advances only in memory."""

    def __init__(self, broker: "Broker", topic: str, group: str, position: int):
        self._broker = broker
        self.topic = topic
        self.group = group
        self.position = position
        self.closed = False

    def poll(self, max_messages: int, timeout_ms: int) -> list[BusMessage]:
        if self.closed:
            raise VpeError("CLOSED", "consumer handle is closed")
        messages = self._broker._topic(self.topic).read(self.position, max_messages, timeout_ms)
        if messages:
            self.position = messages[-1].offset + 1
        return messages

    def commit(self, next_offset: int) -> None:
        if self.closed:
            raise VpeError("CLOSED", "consumer handle is closed")
        self._broker.commit(self.group, self.topic, next_offset)

    def seek(self, position: int) -> None:
        self.position = position

    def close(self) -> None:
        self.closed = True


class Broker:
    """The embedded broker; all five bus operations, shared by server and tests."""

    def __init__(self, root: str | Path, fsync: bool = True):
        self.root = Path(root)
        self.fsync = fsync
        self._lock = threading.Lock()
        self._topics: dict[str, _Topic] = {}
        self._committed: dict[tuple[str, str], int] = {}
        (self.root / "topics").mkdir(parents=True, exist_ok=True)
        (self.root / "groups").mkdir(parents=True, exist_ok=True)
        for topic_dir in sorted((self.root / "topics").iterdir()):
            if topic_dir.is_dir():
                self._topics[topic_dir.name] = _Topic(topic_dir, fsync)
        for group_dir in sorted((self.root / "groups").iterdir()):
            for offset_file in sorted(group_dir.glob("*.offset")):
                topic = offset_file.name[: -len(".offset")]
                self._committed[(group_dir.name, topic)] = int(offset_file.read_text() or 0)

    def _topic(self, name: str) -> _Topic:
        with self._lock:
            topic = self._topics.get(name)
        if topic is None:
            raise VpeError("NO_TOPIC", f"topic {name!r} does not exist")
        return topic

    def create_topic(self, name: str) -> str:
        if not is_token(name):
            raise VpeError("BAD_NAME", f"topic name {name!r} is not a valid token")
        with self._lock:
            if name not in self._topics:
                self._topics[name] = _Topic(self.root / "topics" / name, self.fsync)
        return name

    def publish(self, topic: str, key: str, value: bytes) -> int:
        return self._topic(topic).append(key, value)

    def subscribe(self, topic: str, group: str) -> Consumer:
        if not is_token(group):
            raise VpeError("BAD_NAME", f"group {group!r} is not a valid token")
        self._topic(topic)
        with self._lock:
            position = self._committed.get((group, topic), 0)
        return Consumer(self, topic, group, position)

    def commit(self, group: str, topic: str, next_offset: int) -> None:
        length = len(self._topic(topic))
        if not isinstance(next_offset, int) or not 0 <= next_offset <= length:
            raise VpeError("BAD_OFFSET", f"offset {next_offset!r} outside [0, {length}]")
        group_dir = self.root / "groups" / group
        group_dir.mkdir(parents=True, exist_ok=True)
        final = group_dir / f"{topic}.offset"
        tmp = group_dir / f".{topic}.offset.tmp"
        with self._lock:
            with open(tmp, "w") as fh:
                fh.write(str(next_offset))
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
            os.replace(tmp, final)
            self._committed[(group, topic)] = next_offset

    def committed(self, group: str, topic: str) -> int:
        with self._lock:
            return self._committed.get((group, topic), 0)

    def topic_length(self, name: str) -> int:
        return len(self._topic(name))

    def read_all(self, name: str) -> list[BusMessage]:
        topic = self._topic(name)
        with topic.cond:
            return list(topic.messages)


# --- TCP service and client ------------------------------------------------ #


def _msg_to_json(m: BusMessage) -> dict:
    return {
        "offset": m.offset,
        "key": m.key,
        "value_b64": base64.b64encode(m.value).decode("ascii"),
        "enqueue_time": m.enqueue_time,
    }


class BusServer:
    """Exposes a Broker over the shared frame protocol."""

    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = DEFAULT_BUS_PORT):
        self.broker = broker
        self._consumers: dict[str, Consumer] = {}
        self._lock = threading.Lock()
        self.server = JsonTcpServer(host, port, self._handle)
        self.port = self.server.port

    def start(self) -> "BusServer":
        self.server.start()
        return self

    def run(self) -> None:
        self.server.run()

    def stop(self) -> None:
        self.server.stop()

    def _handle(self, opcode: int, body: dict) -> dict:
        if opcode == OP_CREATE:
            return {"name": self.broker.create_topic(body["name"])}
        if opcode == OP_PUBLISH:
            value = base64.b64decode(body["value_b64"].encode("ascii"))
            return {"offset": self.broker.publish(body["topic"], body["key"], value)}
        if opcode == OP_SUBSCRIBE:
            consumer = self.broker.subscribe(body["topic"], body["group"])
            handle = uuid.uuid4().hex
            with self._lock:
                self._consumers[handle] = consumer
            return {"consumer": handle, "position": consumer.position}
        if opcode == OP_POLL:
            consumer = self._consumer(body["consumer"])
            messages = consumer.poll(int(body["max_messages"]), int(body["timeout_ms"]))
            return {"messages": [_msg_to_json(m) for m in messages]}
        if opcode == OP_COMMIT:
            self._consumer(body["consumer"]).commit(int(body["next_offset"]))
            return {"committed": int(body["next_offset"])}
        raise VpeError("BAD_OPCODE", f"unknown opcode {opcode}")

    def _consumer(self, handle: str) -> Consumer:
        with self._lock:
            consumer = self._consumers.get(handle)
        if consumer is None:
            raise VpeError("CLOSED", f"unknown consumer handle {handle!r}")
        return consumer


class RemoteConsumer:
    """Client-side consumer mirroring the in-process Consumer surface."""

    def __init__(self, client: "BusClient", handle: str, topic: str, group: str, position: int = 0):
        self._client = client
        self._handle = handle
        self.topic = topic
        self.group = group
        self.position = position

    def poll(self, max_messages: int, timeout_ms: int) -> list[BusMessage]:
        body = self._client._rpc.request(
            OP_POLL,
            {"consumer": self._handle, "max_messages": max_messages, "timeout_ms": timeout_ms},
        )
        return [
            BusMessage(
                offset=m["offset"],
                key=m["key"],
                value=base64.b64decode(m["value_b64"].encode("ascii")),
                enqueue_time=m["enqueue_time"],
            )
            for m in body["messages"]
        ]

    def commit(self, next_offset: int) -> None:
        self._client._rpc.request(OP_COMMIT, {"consumer": self._handle, "next_offset": next_offset})


class BusClient:
    """TCP client offering the same operations as the in-process Broker."""

    def __init__(self, addr: str, timeout: float = 30.0):
        self._rpc = JsonTcpClient(addr, timeout=timeout)
        self._known_topics: set[str] = set()

    def create_topic(self, name: str) -> str:
        result = self._rpc.request(OP_CREATE, {"name": name})["name"]
        self._known_topics.add(name)
        return result

    def ensure_topic(self, name: str) -> None:
        if name not in self._known_topics:
            self.create_topic(name)

    def publish(self, topic: str, key: str, value: bytes) -> int:
        body = {"topic": topic, "key": key, "value_b64": base64.b64encode(value).decode("ascii")}
        return self._rpc.request(OP_PUBLISH, body)["offset"]

    def subscribe(self, topic: str, group: str) -> RemoteConsumer:
        body = self._rpc.request(OP_SUBSCRIBE, {"topic": topic, "group": group})
        return RemoteConsumer(self, body["consumer"], topic, group, body["position"])

    def close(self) -> None:
        self._rpc.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(data_dir: str, host: str = "127.0.0.1", port: int = DEFAULT_BUS_PORT, fsync: bool = True) -> None:
    """Run the bus service in the foreground until interrupted."""
    server = BusServer(Broker(data_dir, fsync=fsync), host, port)
    print(f"vpe bus listening on {server.server.host}:{server.port}, data in {data_dir}", flush=True)
    server.run()
