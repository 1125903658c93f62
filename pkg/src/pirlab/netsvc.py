"""Database servers and a caching client over a length-prefixed binary protocol.

Frame layout (little-endian): u32 payload length, u8 frame type, payload.
Servers hold the full store and know the cache split point; the client
holds the cache and never sends it.
"""

from __future__ import annotations

import logging
import os
import signal
import socket
import socketserver
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from pirlab.cache_pir import RetrievalError, retrieve
from pirlab.core import (
    Answer,
    CacheContent,
    MalformedQueryError,
    MessageStore,
    Query,
    SchemeParams,
    SeededRandomness,
    answer_query,
    decode_query,
    encode_query,
)

log = logging.getLogger(__name__)

QUERY = 0x01
ANSWER = 0x02
CONFIG_REQ = 0x03
CONFIG_RESP = 0x04
ERROR = 0x7F
FRAME_TYPES = {QUERY, ANSWER, CONFIG_REQ, CONFIG_RESP, ERROR}

ERR_MALFORMED = 0x01
ERR_OVERSIZED = 0x02
ERR_UNKNOWN_TYPE = 0x03

HEADER = struct.Struct("<IB")
CONFIG = struct.Struct("<5I")
MAX_FRAME = 64 * 1024 * 1024

CONNECT_TIMEOUT = 5.0
REQUEST_TIMEOUT = 30.0

query_wire_encode = encode_query
query_wire_decode = decode_query


class ProtocolError(RuntimeError):
    pass


class OversizedFrame(ProtocolError):
    def __init__(self, length: int):
        super().__init__(f"frame of {length} bytes exceeds {MAX_FRAME}")
        self.length = length


@dataclass(frozen=True)
class Frame:
    frame_type: int
    payload: bytes = b""

    @property
    def length(self) -> int:
        return len(self.payload)

    def encode(self) -> bytes:
        return HEADER.pack(len(self.payload), self.frame_type) + self.payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame" if buf else "connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket, max_size: int = MAX_FRAME) -> Frame:
    length, frame_type = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if length > max_size:
        raise OversizedFrame(length)
    return Frame(frame_type, _recv_exact(sock, length))


def write_frame(sock: socket.socket, frame: Frame) -> int:
    data = frame.encode()
    sock.sendall(data)
    return len(data)


def encode_config(params: SchemeParams) -> bytes:
    return CONFIG.pack(params.num_databases, params.num_messages, params.length,
                       params.cache_numerator, params.cache_denominator)


def decode_config(payload: bytes) -> tuple[int, int, int, int, int]:
    if len(payload) != CONFIG.size:
        raise ProtocolError(f"config payload has {len(payload)} bytes, expected {CONFIG.size}")
    return CONFIG.unpack(payload)


# --------------------------------------------------------------------------
# Server
# --------------------------------------------------------------------------


class _Handler(socketserver.BaseRequestHandler):
    server: "DatabaseServer"

    def handle(self) -> None:
        sock = self.request
        while True:
            try:
                frame = read_frame(sock)
            except OversizedFrame:
                write_frame(sock, Frame(ERROR, bytes([ERR_OVERSIZED])))
                return
            except (ConnectionError, OSError):
                return
            write_frame(sock, self.server.respond(frame))


class DatabaseServer(socketserver.ThreadingTCPServer):
    """One replicated database. Stateless: every answer depends only on the query."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, store: MessageStore, params: SchemeParams, address: tuple[str, int]):
        store.check(params)
        self.store = store
        self.params = params
        super().__init__(address, _Handler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def respond(self, frame: Frame) -> Frame:
        if frame.frame_type == CONFIG_REQ:
            return Frame(CONFIG_RESP, encode_config(self.params))
        if frame.frame_type != QUERY:
            return Frame(ERROR, bytes([ERR_UNKNOWN_TYPE]))
        try:
            query = decode_query(frame.payload)
            answer = answer_query(query, self.store)
        except MalformedQueryError as exc:
            log.debug("rejecting query: %s", exc)
            return Frame(ERROR, bytes([ERR_MALFORMED]))
        return Frame(ANSWER, answer.to_bytes())

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name=f"db-{self.endpoint}", daemon=True)
        thread.start()
        return thread


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


def serve(store: MessageStore, params: SchemeParams, endpoint: str) -> None:
    """Answer queries on ``endpoint`` until SIGINT/SIGTERM."""
    server = DatabaseServer(store, params, parse_endpoint(endpoint))
    log.info("serving K=%d L=%d on %s", params.num_messages, params.length, server.endpoint)

    def stop(signum, _frame):
        threading.Thread(target=server.shutdown, daemon=True).start()

    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, stop)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


# --------------------------------------------------------------------------
# Client
# --------------------------------------------------------------------------


def request_timeout() -> float:
    raw = os.environ.get("PIRLAB_TIMEOUT_MS")
    if raw:
        return int(raw) / 1000.0
    return REQUEST_TIMEOUT


@dataclass
class WireReport:
    answer_payload_bytes: int = 0
    framing_overhead_bytes: int = 0
    query_upload_bytes: int = 0
    query_frames: int = 0
    downloaded_symbols: int = 0
    message_length: int = 0


class RemoteDatabases:
    """Answer provider backed by N database servers."""

    def __init__(self, endpoints: list[str], connect_timeout: float = CONNECT_TIMEOUT,
                 timeout: float | None = None):
        self.endpoints = list(endpoints)
        self.num_databases = len(self.endpoints)
        self.connect_timeout = connect_timeout
        self.timeout = request_timeout() if timeout is None else timeout
        self.report = WireReport()
        self._lock = threading.Lock()

    def _exchange(self, n: int, frame: Frame) -> Frame:
        endpoint = self.endpoints[n]
        try:
            with socket.create_connection(parse_endpoint(endpoint), timeout=self.connect_timeout) as sock:
                sock.settimeout(self.timeout)
                write_frame(sock, frame)
                reply = read_frame(sock)
        except (OSError, ConnectionError, ProtocolError) as exc:
            raise RetrievalError(endpoint, f"{type(exc).__name__}: {exc}") from exc
        if reply.frame_type == ERROR:
            code = reply.payload[0] if reply.payload else -1
            raise RetrievalError(endpoint, f"server error code 0x{code:02x}")
        return reply

    def config(self, n: int) -> tuple[int, int, int, int, int]:
        reply = self._exchange(n, Frame(CONFIG_REQ))
        if reply.frame_type != CONFIG_RESP:
            raise RetrievalError(self.endpoints[n], f"unexpected frame type 0x{reply.frame_type:02x}")
        return decode_config(reply.payload)

    def _answer(self, n: int, query: Query) -> Answer:
        payload = encode_query(query)
        reply = self._exchange(n, Frame(QUERY, payload))
        if reply.frame_type != ANSWER:
            raise RetrievalError(self.endpoints[n], f"unexpected frame type 0x{reply.frame_type:02x}")
        if len(reply.payload) != len(query):
            raise RetrievalError(self.endpoints[n],
                                 f"answer has {len(reply.payload)} symbols for {len(query)} sums")
        with self._lock:
            self.report.query_frames += 1
            self.report.query_upload_bytes += len(payload)
            self.report.answer_payload_bytes += len(reply.payload)
            self.report.framing_overhead_bytes += 2 * HEADER.size
        return Answer(np.frombuffer(reply.payload, dtype=np.uint8).copy())

    def answer_all(self, queries: list[Query]) -> list[Answer]:
        if len(queries) != self.num_databases:
            raise ValueError(f"{len(queries)} queries for {self.num_databases} databases")
        with ThreadPoolExecutor(max_workers=max(self.num_databases, 1)) as pool:
            futures = [pool.submit(self._answer, n, q) for n, q in enumerate(queries)]
            return [f.result() for f in futures]


def fetch(theta: int, params: SchemeParams, cache: CacheContent, endpoints: list[str],
          rng: SeededRandomness, connect_timeout: float = CONNECT_TIMEOUT,
          timeout: float | None = None) -> tuple[np.ndarray, WireReport]:
    """Retrieve message ``theta`` (0-based) from the servers at ``endpoints``."""
    if len(endpoints) != params.num_databases:
        raise ValueError(f"need {params.num_databases} endpoints, got {len(endpoints)}")
    remote = RemoteDatabases(endpoints, connect_timeout, timeout)
    message, cost = retrieve(theta, params, cache, remote, rng)
    report = remote.report
    report.downloaded_symbols = cost.downloaded_symbols
    report.message_length = params.length
    return message, report
