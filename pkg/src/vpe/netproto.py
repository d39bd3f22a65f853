"""Length-prefixed JSON-over-TCP framing shared by the platform services.

A frame is a 1-byte opcode, a 4-byte big-endian body length, then a UTF-8
JSON body. Responses mirror the request opcode; error responses carry
``{"error": code, "detail": ...}`` which clients re-raise as ``VpeError``.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
from typing import Callable

from vpe.errors import VpeError

MAX_FRAME = 64 * 1024 * 1024


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf += chunk
    return buf


def send_frame(sock: socket.socket, opcode: int, body: dict) -> None:
    data = json.dumps(body, separators=(",", ":")).encode("utf-8")
    sock.sendall(struct.pack(">BI", opcode, len(data)) + data)


def recv_frame(sock: socket.socket) -> tuple[int, dict]:
    opcode, length = struct.unpack(">BI", _recv_exact(sock, 5))
    if length > MAX_FRAME:
        raise ConnectionError(f"frame of {length} bytes exceeds limit")
    body = json.loads(_recv_exact(sock, length).decode("utf-8"))
    if not isinstance(body, dict):
        raise ConnectionError("frame body is not a JSON object")
    return opcode, body


class JsonTcpServer:
    """Threaded request/response server dispatching frames to a handler.

    The handler receives (opcode, body) and returns the response body;
    raising VpeError produces an error response on the same opcode.
    """

    def __init__(self, host: str, port: int, handler: Callable[[int, dict], dict]):
        self._handler = handler
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(64)
        self.host, self.port = self._sock.getsockname()[:2]
        self._stop = threading.Event()
        self._accept_thread: threading.Thread | None = None

    def start(self) -> "JsonTcpServer":
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def run(self) -> None:
        self._accept_loop()

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                break
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        with conn:
            while not self._stop.is_set():
                try:
                    opcode, body = recv_frame(conn)
                except (ConnectionError, json.JSONDecodeError, struct.error, OSError):
                    return
                try:
                    response = self._handler(opcode, body)
                except VpeError as e:
                    response = {"error": e.code, "detail": e.detail}
                except Exception as e:  # noqa: BLE001 - keep the connection alive
                    response = {"error": "INTERNAL", "detail": f"{type(e).__name__}: {e}"}
                try:
                    send_frame(conn, opcode, response)
                except OSError:
                    return


class JsonTcpClient:
    """Blocking request/response client; thread-safe, reconnects on failure.

    A broken connection is retried once per request; services are idempotent
    or at-least-once, so a replayed request is safe.
    """

    def __init__(self, addr: str, timeout: float = 30.0):
        self.addr = addr
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _connect(self) -> socket.socket:
        host, port = parse_addr(self.addr)
        sock = socket.create_connection((host, port), timeout=self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock

    def request(self, opcode: int, body: dict) -> dict:
        with self._lock:
            for attempt in (0, 1):
                if self._sock is None:
                    self._sock = self._connect()
                try:
                    send_frame(self._sock, opcode, body)
                    _, response = recv_frame(self._sock)
                    break
                except (ConnectionError, OSError):
                    self.close_locked()
                    if attempt:
                        raise
        if "error" in response:
            raise VpeError(response["error"], response.get("detail", ""))
        return response

    def close_locked(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def close(self) -> None:
        with self._lock:
            self.close_locked()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
