"""Message layer between workers, the leader, and the scheduler.

Two backends share the :class:`Envelope` type:

* :class:`InProcFabric` delivers through an :class:`~elastictrain.clock.EventLoop`
  with per-link injectable latency, so protocol tests run on simulated time.
* :class:`TcpEndpoint` speaks length-prefixed frames over TCP with Nagle's
  algorithm disabled.

Frame layout: 4-byte big-endian payload length, 1-byte kind, payload.
"""
from __future__ import annotations

import enum
import json
import logging
import queue
import random
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

logger = logging.getLogger(__name__)

HEADER = struct.Struct(">IB")
DEFAULT_MAX_PAYLOAD = 16 << 20
_HELLO = 0  # first frame on a TCP connection; payload is the sender id


class PeerGone(Exception):
    """The destination endpoint is disconnected or unknown."""


class Unsupported(Exception):
    pass


class FrameError(ValueError):
    pass


class Kind(enum.IntEnum):
    REGISTER = 1
    READY = 2
    OK = 3
    TENSOR_READY = 4
    READY_TO_REDUCE = 5
    SHARD_REQUEST = 6
    SHARD_REPLY = 7
    PROGRESS = 8
    SCALE_CMD = 9
    RETRY = 10
    ACK = 11
    MODEL_BROADCAST = 12
    EXIT = 13
    TOPOLOGY = 14
    JOB_META = 15
    FAULT = 16


@dataclass(frozen=True)
class Envelope:
    kind: Kind
    payload: bytes = b""
    sender: str = ""

    @classmethod
    def make(cls, kind: Kind, sender: str, body: Any = None) -> "Envelope":
        data = b"" if body is None else json.dumps(body, separators=(",", ":")).encode()
        return cls(Kind(kind), data, sender)

    def body(self) -> Any:
        return json.loads(self.payload) if self.payload else None


def encode_frame(env: Envelope, max_payload: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    if len(env.payload) > max_payload:
        raise FrameError(f"payload of {len(env.payload)} bytes exceeds {max_payload}")
    return HEADER.pack(len(env.payload), int(env.kind)) + env.payload


def decode_frame(buf: bytes, sender: str = "",
                 max_payload: int = DEFAULT_MAX_PAYLOAD) -> tuple[Optional[Envelope], int]:
    """Decode one frame from ``buf``. Returns (envelope or None, bytes consumed)."""
    if len(buf) < HEADER.size:
        return None, 0
    length, kind = HEADER.unpack_from(buf)
    if length > max_payload:
        raise FrameError(f"frame length {length} exceeds {max_payload}")
    end = HEADER.size + length
    if len(buf) < end:
        return None, 0
    try:
        k = Kind(kind)
    except ValueError:
        raise FrameError(f"unknown kind byte {kind}") from None
    return Envelope(k, bytes(buf[HEADER.size:end]), sender), end


# ---------------------------------------------------------------------------
# in-process backend


@dataclass(frozen=True)
class LinkDelay:
    base: float = 0.0
    jitter: float = 0.0  # uniform extra delay in [0, jitter)


@dataclass
class LatencyProfile:
    """Per-link delays. Keys are (src, dst); ``"*"`` matches any endpoint."""

    links: dict = field(default_factory=dict)
    default: LinkDelay = LinkDelay()
    seed: int = 0

    def delay_for(self, src: str, dst: str) -> LinkDelay:
        for key in ((src, dst), (src, "*"), ("*", dst)):
            if key in self.links:
                return self.links[key]
        return self.default


class InProcEndpoint:
    def __init__(self, fabric: "InProcFabric", id: str,
                 handler: Optional[Callable[[Envelope], Any]] = None):
        self.fabric = fabric
        self.id = id
        self.handler = handler
        self.inbox: list[Envelope] = []
        self.connected = True

    @property
    def address(self) -> str:
        return f"inproc://{self.id}"

    def send(self, dst: str, env: Envelope) -> None:
        self.fabric.send(self.id, dst, env)

    def recv_all(self) -> list[Envelope]:
        out, self.inbox = self.inbox, []
        return out

    def _deliver(self, env: Envelope) -> None:
        if not self.connected:
            return
        if self.handler is not None:
            self.handler(env)
        else:
            self.inbox.append(env)


class InProcFabric:
    """Deterministic channel fabric driven by an event loop.

    Delivery on each (src, dst) link is FIFO even when a jitter profile would
    otherwise reorder messages.
    """

    def __init__(self, loop, max_payload: int = DEFAULT_MAX_PAYLOAD,
                 bandwidth: Optional[float] = None):
        self.loop = loop
        self.max_payload = max_payload
        self.bandwidth = bandwidth  # bytes/s; adds size-proportional transfer time
        self._endpoints: dict[str, InProcEndpoint] = {}
        self._profile = LatencyProfile()
        self._rng = random.Random(0)
        self._last_delivery: dict[tuple[str, str], float] = {}
        self.sent = 0
        self.delivery_log: Optional[list] = None

    def endpoint(self, id: str, handler=None) -> InProcEndpoint:
        ep = self._endpoints.get(id)
        if ep is None or not ep.connected:
            ep = InProcEndpoint(self, id, handler)
            self._endpoints[id] = ep
        elif handler is not None:
            ep.handler = handler
        return ep

    def inject_latency(self, profile: LatencyProfile) -> None:
        self._profile = profile
        self._rng = random.Random(profile.seed)

    def is_connected(self, id: str) -> bool:
        ep = self._endpoints.get(id)
        return ep is not None and ep.connected

    def disconnect(self, id: str) -> None:
        ep = self._endpoints.get(id)
        if ep is not None:
            ep.connected = False

    def send(self, src: str, dst: str, env: Envelope) -> None:
        ep = self._endpoints.get(dst)
        if ep is None or not ep.connected:
            raise PeerGone(dst)
        if len(env.payload) > self.max_payload:
            raise FrameError(f"payload of {len(env.payload)} bytes exceeds {self.max_payload}")
        if env.sender != src:
            env = Envelope(env.kind, env.payload, src)
        d = self._profile.delay_for(src, dst)
        delay = d.base + (self._rng.random() * d.jitter if d.jitter > 0 else 0.0)
        if self.bandwidth:
            delay += (HEADER.size + len(env.payload)) / self.bandwidth
        link = (src, dst)
        when = max(self.loop.now + delay, self._last_delivery.get(link, 0.0))
        self._last_delivery[link] = when
        self.sent += 1
        if self.delivery_log is not None:
            self.delivery_log.append((src, dst, int(env.kind), when))
        self.loop.call_at(when, ep._deliver, env)


# ---------------------------------------------------------------------------
# TCP backend


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        b = sock.recv(n)
        if not b:
            raise ConnectionError("peer closed")
        chunks.append(b)
        n -= len(b)
    return b"".join(chunks)


def _read_frame(sock: socket.socket, max_payload: int) -> tuple[int, bytes]:
    length, kind = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if length > max_payload:
        raise FrameError(f"frame length {length} exceeds {max_payload}")
    return kind, _recv_exact(sock, length) if length else b""


def _nodelay(sock: socket.socket) -> None:
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


class TcpEndpoint:
    """A listening TCP endpoint with an inbox.

    Outgoing connections are cached per destination so per-link FIFO follows
    from TCP's in-order delivery. Each connection opens with a hello frame
    naming the sender.
    """

    def __init__(self, id: str, host: str = "127.0.0.1",
                 port_range: tuple[int, int] = (0, 0),
                 handler: Optional[Callable[[Envelope], Any]] = None,
                 max_payload: int = DEFAULT_MAX_PAYLOAD):
        self.id = id
        self.handler = handler
        self.max_payload = max_payload
        self.inbox: "queue.Queue[Envelope]" = queue.Queue()
        self._out: dict[tuple[str, int], socket.socket] = {}
        self._out_lock = threading.Lock()
        self._conns: list[socket.socket] = []
        self._closed = threading.Event()
        self._server = self._bind(host, port_range)
        self._server.listen(64)
        self.address = self._server.getsockname()[:2]
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True,
                                          name=f"tcp-accept-{id}")
        self._acceptor.start()

    @staticmethod
    def _bind(host: str, port_range: tuple[int, int]) -> socket.socket:
        lo, hi = port_range
        last_err: Optional[OSError] = None
        for port in range(lo, max(lo, hi) + 1):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                s.bind((host, port))
                return s
            except OSError as e:
                last_err = e
                s.close()
        raise OSError(f"no free port in {port_range}") from last_err

    def inject_latency(self, profile: LatencyProfile) -> None:
        raise Unsupported("latency injection is only available on the in-process backend")

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            _nodelay(conn)
            self._conns.append(conn)
            threading.Thread(target=self._reader, args=(conn,), daemon=True).start()

    def _reader(self, conn: socket.socket) -> None:
        try:
            kind, payload = _read_frame(conn, self.max_payload)
            if kind != _HELLO:
                raise FrameError("connection did not open with a hello frame")
            sender = payload.decode()
            while True:
                kind, payload = _read_frame(conn, self.max_payload)
                env = Envelope(Kind(kind), payload, sender)
                if self.handler is not None:
                    self.handler(env)
                else:
                    self.inbox.put(env)
        except (ConnectionError, OSError, FrameError, ValueError):
            pass
        finally:
            conn.close()

    def _connection(self, dst: tuple[str, int]) -> socket.socket:
        with self._out_lock:
            s = self._out.get(dst)
            if s is None:
                try:
                    s = socket.create_connection(dst, timeout=5.0)
                except OSError as e:
                    raise PeerGone(f"{dst}: {e}") from e
                _nodelay(s)
                s.settimeout(None)
                hello = self.id.encode()
                s.sendall(HEADER.pack(len(hello), _HELLO) + hello)
                self._out[dst] = s
            return s

    def send(self, dst: tuple[str, int], env: Envelope) -> None:
        frame = encode_frame(env, self.max_payload)
        s = self._connection(tuple(dst))
        try:
            s.sendall(frame)
        except OSError as e:
            with self._out_lock:
                self._out.pop(tuple(dst), None)
            s.close()
            raise PeerGone(f"{dst}: {e}") from e

    def recv(self, timeout: Optional[float] = None) -> Envelope:
        return self.inbox.get(timeout=timeout)

    def close(self) -> None:
        self._closed.set()
        try:
            self._server.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._server.close()
        with self._out_lock:
            for s in self._out.values():
                s.close()
            self._out.clear()
        for c in self._conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            c.close()
