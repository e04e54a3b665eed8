"""Route the simulated job's envelopes through real loopback TCP sockets.

The job still runs on the event loop's simulated clock; every envelope is
additionally framed, written to the destination's TCP endpoint, and read
back before it is scheduled for delivery. This exercises the wire format
and socket plumbing end to end without giving up determinism.
"""
from __future__ import annotations

import queue
from typing import Optional

from ..transport import (DEFAULT_MAX_PAYLOAD, Envelope, InProcFabric, LatencyProfile, PeerGone,
                         TcpEndpoint)


class SocketFabric(InProcFabric):
    def __init__(self, loop, max_payload: int = DEFAULT_MAX_PAYLOAD,
                 bandwidth: Optional[float] = None, timeout: float = 5.0):
        super().__init__(loop, max_payload, bandwidth)
        self.timeout = timeout
        self._tcp: dict[str, TcpEndpoint] = {}

    def endpoint(self, id: str, handler=None):
        ep = super().endpoint(id, handler)
        if id not in self._tcp:
            self._tcp[id] = TcpEndpoint(id, max_payload=self.max_payload)
        return ep

    def inject_latency(self, profile: LatencyProfile) -> None:
        # simulated delays still apply on top of the real transfer
        super().inject_latency(profile)

    def send(self, src: str, dst: str, env: Envelope) -> None:
        if not self.is_connected(dst):
            raise PeerGone(dst)
        out = self._tcp[src]
        inbox = self._tcp[dst]
        out.send(inbox.address, Envelope(env.kind, env.payload, src))
        try:
            got = inbox.recv(timeout=self.timeout)
        except queue.Empty:
            raise PeerGone(f"{dst}: no frame within {self.timeout}s") from None
        if got.payload != env.payload or got.kind != env.kind:
            raise RuntimeError("frame corrupted on loopback")
        super().send(src, dst, got)

    def close(self) -> None:
        for ep in self._tcp.values():
            ep.close()
        self._tcp.clear()
