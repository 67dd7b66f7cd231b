"""Per-host transport: reliable byte streams with synthesized TCP headers.

There is no congestion control or retransmission. Segments are delivered
by the network or dropped explicitly; a dropped segment leaves a hole that
stalls the receiving direction, which is what a device overload looks like
from the application side.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from .network import ACK, FIN, MAX_SEGMENT, PSH, RST, SYN, Frame, Network

EPHEMERAL_BASE = 49152
MAX_OOO_SEGMENTS = 256


class StreamError(RuntimeError):
    pass


class StreamClosed(StreamError):
    pass


class ConnectBlocked(StreamError):
    """No permitted path from client to server port."""


class Stream:
    """One endpoint of a duplex byte stream."""

    def __init__(self, host: "HostStack", lport: int, peer: str, pport: int, isn: int, state: str):
        self.host = host
        self.lport = lport
        self.peer = peer
        self.pport = pport
        self.state = state  # connecting | open | closed
        self.snd_nxt = isn
        self.rcv_nxt = 0
        self.reset = False
        self.peer_closed = False
        self._tx_pending = bytearray()
        self._rx = bytearray()
        self._ooo: dict[int, bytes] = {}
        self.bytes_sent = 0
        self.bytes_received = 0

    def __repr__(self):
        return f"Stream({self.host.name}:{self.lport} <-> {self.peer}:{self.pport} {self.state})"

    @property
    def is_open(self) -> bool:
        return self.state == "open"

    def _frame(self, flags: int, now: int, payload: bytes = b"") -> Frame:
        return Frame(self.host.name, self.peer, self.lport, self.pport, flags, self.snd_nxt, self.rcv_nxt,
                     payload, "segment", now)

    def send(self, data: bytes, now: int) -> None:
        if self.state == "closed":
            raise StreamClosed(repr(self))
        if self.state == "connecting":
            self._tx_pending += data
            return
        self._transmit(bytes(data), now)

    def _transmit(self, data: bytes, now: int) -> None:
        for off in range(0, len(data), MAX_SEGMENT):
            chunk = data[off:off + MAX_SEGMENT]
            self.host.emit(self._frame(PSH | ACK, now, chunk))
            self.snd_nxt += len(chunk)
            self.bytes_sent += len(chunk)

    def recv(self) -> bytes:
        out = bytes(self._rx)
        self._rx.clear()
        return out

    def close(self, now: int) -> None:
        if self.state == "open":
            self.host.emit(self._frame(FIN | ACK, now))
            self.snd_nxt += 1
        elif self.state == "connecting":
            self.host.emit(self._frame(RST, now))
        self.state = "closed"

    def abort(self, now: int) -> None:
        if self.state != "closed":
            self.host.emit(self._frame(RST | ACK, now))
        self.state = "closed"
        self.reset = True

    # -- receive path ---------------------------------------------------------

    def _on_data(self, seq: int, payload: bytes) -> None:
        if seq < self.rcv_nxt:
            cut = self.rcv_nxt - seq
            if cut >= len(payload):
                return
            seq, payload = self.rcv_nxt, payload[cut:]
        if seq > self.rcv_nxt:
            if len(self._ooo) < MAX_OOO_SEGMENTS:
                self._ooo.setdefault(seq, payload)
            return
        self._accept(payload)
        while self.rcv_nxt in self._ooo:
            self._accept(self._ooo.pop(self.rcv_nxt))
        for stale in [s for s in self._ooo if s < self.rcv_nxt]:
            rest = self._ooo.pop(stale)
            if stale + len(rest) > self.rcv_nxt:
                self._on_data(stale, rest)

    def _accept(self, payload: bytes) -> None:
        self._rx += payload
        self.rcv_nxt += len(payload)
        self.bytes_received += len(payload)


@dataclass(frozen=True)
class ProbeReply:
    t: int
    host: str
    port: int
    open: bool


class HostStack:
    def __init__(self, net: Network, name: str, seed: int = 0):
        self.net = net
        self.name = name
        self.enabled = True
        self.listeners: dict[int, list[Stream]] = {}
        self.streams: dict[tuple[int, str, int], Stream] = {}
        self.rng = random.Random(f"isn:{seed}:{name}")
        self._next_port = EPHEMERAL_BASE
        self.probe_replies: list[ProbeReply] = []
        self.ignored = 0
        net.hosts[name] = self

    def emit(self, frame: Frame) -> None:
        if self.enabled:
            self.net.enqueue(frame)

    def _ephemeral(self) -> int:
        port = self._next_port
        self._next_port = EPHEMERAL_BASE + (self._next_port + 1 - EPHEMERAL_BASE) % 16384
        return port

    def listen(self, port: int) -> None:
        self.listeners.setdefault(port, [])

    def unlisten(self, port: int) -> None:
        self.listeners.pop(port, None)

    def accept(self, port: int) -> list[Stream]:
        queue = self.listeners.get(port)
        if not queue:
            return []
        out = list(queue)
        queue.clear()
        return out

    def connect(self, peer: str, port: int, now: int) -> Stream:
        """Open a stream; the SYN is emitted even when the path is blocked."""
        isn = self.rng.getrandbits(32)
        lport = self._ephemeral()
        stream = Stream(self, lport, peer, port, isn, "connecting")
        self.emit(stream._frame(SYN, now))
        stream.snd_nxt += 1
        if not self.net.permitted(self.name, peer, port):
            stream.state = "closed"
            raise ConnectBlocked(f"{self.name} -> {peer}:{port} blocked")
        self.streams[(lport, peer, port)] = stream
        return stream

    def probe(self, peer: str, port: int, now: int) -> None:
        self.emit(Frame(self.name, peer, self._ephemeral(), port, SYN, self.rng.getrandbits(32), 0, b"", "probe", now))

    def receive(self, frames: list[Frame], now: int) -> None:
        for f in frames:
            if not self.enabled or f.kind == "flood":
                self.ignored += f.count
            elif f.kind == "probe":
                self._on_probe(f, now)
            else:
                self._on_segment(f, now)

    def _reply(self, f: Frame, flags: int, now: int, kind: str, seq: int = 0) -> None:
        self.emit(Frame(self.name, f.src, f.dport, f.sport, flags, seq, f.tcp_seq + 1, b"", kind, now))

    def _on_probe(self, f: Frame, now: int) -> None:
        if f.flags & SYN and not f.flags & ACK:
            if f.dport in self.listeners:
                self._reply(f, SYN | ACK, now, "probe", self.rng.getrandbits(32))
            else:
                self._reply(f, RST | ACK, now, "probe")
        else:
            is_open = bool(f.flags & SYN)
            self.probe_replies.append(ProbeReply(now, f.src, f.sport, is_open))
            if is_open:
                self.emit(Frame(self.name, f.src, f.dport, f.sport, RST, f.tcp_ack, 0, b"", "probe", now))

    def _on_segment(self, f: Frame, now: int) -> None:
        key = (f.dport, f.src, f.sport)
        stream = self.streams.get(key)
        if f.flags & SYN and not f.flags & ACK:
            if stream is not None or f.dport not in self.listeners:
                if stream is None:
                    self._reply(f, RST | ACK, now, "segment")
                return
            stream = Stream(self, f.dport, f.src, f.sport, self.rng.getrandbits(32), "open")
            stream.rcv_nxt = f.tcp_seq + 1
            self.emit(stream._frame(SYN | ACK, now))
            stream.snd_nxt += 1
            self.streams[key] = stream
            self.listeners[f.dport].append(stream)
            return
        if stream is None:
            return
        if f.flags & RST:
            stream.state = "closed"
            stream.reset = True
            return
        if f.flags & SYN:  # SYN-ACK
            if stream.state == "connecting":
                stream.rcv_nxt = f.tcp_seq + 1
                stream.state = "open"
                self.emit(stream._frame(ACK, now))
                pending = bytes(stream._tx_pending)
                stream._tx_pending.clear()
                if pending:
                    stream._transmit(pending, now)
            return
        if f.payload:
            stream._on_data(f.tcp_seq, f.payload)
            self.emit(stream._frame(ACK, now))
        if f.flags & FIN and f.tcp_seq + len(f.payload) == stream.rcv_nxt:
            stream.rcv_nxt += 1
            stream.peer_closed = True
            if stream.state == "open":
                self.emit(stream._frame(FIN | ACK, now))
                stream.snd_nxt += 1
            else:
                self.emit(stream._frame(ACK, now))
            stream.state = "closed"


def attach_hosts(net: Network, seed: int = 0) -> dict[str, HostStack]:
    return {n.name: HostStack(net, n.name, seed) for n in net.topo.hosts()}
