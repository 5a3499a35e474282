"""Transports carrying protocol messages between actors.

Every transport offers ``send(src, dst, msg)`` and ``receive(dst)``;
``receive`` returns all messages delivered to ``dst`` since its last call.
Delivery is exactly once and FIFO per sender. Actor 0 is the server.
"""
from __future__ import annotations

import socket
import time
from collections import defaultdict, deque

import numpy as np

from .messages import Message, MessageLog, decode, encode, frame_size


class TransportError(RuntimeError):
    pass


class Transport:
    def __init__(self, log: MessageLog | None = None):
        self.log = log
        self.n_messages = 0
        self.n_bytes = 0
        self.by_iteration = defaultdict(int)

    def _account(self, src, dst, msg, nbytes):
        self.n_messages += 1
        self.n_bytes += nbytes
        self.by_iteration[msg.iteration] += 1
        if self.log is not None:
            self.log.write(src, dst, msg)

    def send(self, src: int, dst: int, msg: Message) -> None:
        raise NotImplementedError

    def receive(self, dst: int) -> list:
        raise NotImplementedError

    def close(self) -> None:
        if self.log is not None:
            self.log.close()


class InProcessTransport(Transport):
    """Queues in memory; payload arrays are copied on send."""

    def __init__(self, log=None):
        super().__init__(log)
        self._queues = defaultdict(deque)

    def send(self, src, dst, msg):
        copy = Message(msg.tag, msg.run_id, msg.iteration, msg.actor,
                       {k: v.copy() for k, v in msg.parts.items()})
        self._queues[dst].append((src, copy))
        self._account(src, dst, msg, frame_size(msg))

    def receive(self, dst):
        q = self._queues[dst]
        out = [m for _, m in q]
        q.clear()
        return out


class ShuffledTransport(InProcessTransport):
    """Randomly interleaves senders on delivery while keeping per-sender order."""

    def __init__(self, seed: int, log=None):
        super().__init__(log)
        self._rng = np.random.default_rng(seed)

    def receive(self, dst):
        q = self._queues[dst]
        by_src = defaultdict(deque)
        for src, m in q:
            by_src[src].append(m)
        q.clear()
        order = [s for s, msgs in by_src.items() for _ in msgs]
        self._rng.shuffle(order)
        return [by_src[s].popleft() for s in order]


class SocketTransport(Transport):
    """Length-prefixed frames over one local socket pair per destination.

    Writes are non-blocking; when the kernel buffer is full the reader side
    is drained into memory so a single-threaded driver never deadlocks.
    """

    def __init__(self, log=None, timeout: float = 10.0):
        super().__init__(log)
        self.timeout = timeout
        self._pairs = {}
        self._buffers = defaultdict(bytearray)
        self._pending = defaultdict(int)

    def _pair(self, dst):
        if dst not in self._pairs:
            w, r = socket.socketpair()
            w.setblocking(False)
            r.setblocking(False)
            self._pairs[dst] = (w, r)
        return self._pairs[dst]

    def _drain(self, dst):
        _, r = self._pair(dst)
        while True:
            try:
                chunk = r.recv(1 << 16)
            except BlockingIOError:
                return
            if not chunk:
                raise TransportError("socket closed")
            self._buffers[dst].extend(chunk)

    def send(self, src, dst, msg):
        frame = memoryview(encode(msg))
        w, _ = self._pair(dst)
        sent = 0
        while sent < len(frame):
            try:
                sent += w.send(frame[sent:])
            except BlockingIOError:
                self._drain(dst)
        self._pending[dst] += 1
        self._account(src, dst, msg, len(frame))

    def receive(self, dst):
        out = []
        buf = self._buffers[dst]
        deadline = time.monotonic() + self.timeout
        while self._pending[dst] > 0:
            self._drain(dst)
            while len(buf) >= 4:
                length = int.from_bytes(buf[:4], "big")
                if len(buf) < 4 + length:
                    break
                out.append(decode(bytes(buf[: 4 + length])))
                del buf[: 4 + length]
                self._pending[dst] -= 1
            if self._pending[dst] > 0 and time.monotonic() > deadline:
                raise TransportError(f"timed out waiting for {self._pending[dst]} frame(s) for actor {dst}")
        return out

    def close(self):
        for w, r in self._pairs.values():
            w.close()
            r.close()
        self._pairs.clear()
        super().close()


def make_transport(kind: str, seed: int = 0, log: MessageLog | None = None) -> Transport:
    if kind == "in-process":
        return InProcessTransport(log)
    if kind == "shuffled":
        return ShuffledTransport(seed, log)
    if kind == "socket":
        return SocketTransport(log)
    raise ValueError(f"unknown transport {kind!r}")

