"""Hop-by-hop frame delivery with latency, capacity, firewall and taps."""
from __future__ import annotations

import heapq
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Protocol

from .topology import Routing, Topology, Unreachable, evaluate_rules

FIN, SYN, RST, PSH, ACK = 0x01, 0x02, 0x04, 0x08, 0x10

MAX_SEGMENT = 1460


@dataclass(frozen=True, slots=True)
class Frame:
    src: str
    dst: str
    sport: int
    dport: int
    flags: int
    tcp_seq: int = 0
    tcp_ack: int = 0
    payload: bytes = b""
    kind: str = "segment"  # segment | probe | flood
    t_enqueue: int = 0
    count: int = 1  # flood bursts aggregate identical frames
    seq: int = -1  # global enqueue order, assigned by the network

    def __post_init__(self):
        if len(self.payload) > MAX_SEGMENT:
            raise ValueError(f"payload {len(self.payload)} > {MAX_SEGMENT} bytes")


@dataclass(frozen=True, slots=True)
class Drop:
    t: int
    reason: str
    frame: Frame


@dataclass
class Tap:
    """Capture point at a host interface (``node``) or on a link."""

    id: str
    node: str | None = None
    link: int | None = None
    records: list[tuple[int, int, Frame]] = field(default_factory=list)

    def __post_init__(self):
        if (self.node is None) == (self.link is None):
            raise ValueError("tap attaches to exactly one of node or link")

    def ordered(self) -> list[tuple[int, int, Frame]]:
        return sorted(self.records, key=lambda r: (r[0], r[1]))


class Interceptor(Protocol):
    def on_frame(self, frame: Frame, from_node: str, t: int) -> list[tuple[Frame, int]]:
        """Frames to forward with extra delay (µs); empty drops the frame."""


def conn_key(a: str, ap: int, b: str, bp: int) -> tuple:
    return (a, ap, b, bp) if (a, ap) <= (b, bp) else (b, bp, a, ap)


class Network:
    def __init__(self, topo: Topology):
        self.topo = topo
        self.routing = Routing.build(topo)
        self.nodes = {n.name: n for n in topo.nodes}
        self.links = {l.id: l for l in topo.links}
        self.now = 0
        self.window_start = 0
        self._seq = 0
        self._uid = 0  # heap tie-break
        self._heap: list = []
        self._used: dict[tuple[int, str], int] = {}
        self.inbox: dict[str, list[Frame]] = {}
        self.node_taps: dict[str, list[Tap]] = {}
        self.link_taps: dict[int, list[Tap]] = {}
        self.taps: list[Tap] = []
        self.interceptors: dict[int, Interceptor] = {}
        self.fw_conns: set[tuple] = set()
        self.counters: Counter = Counter()
        self.drops: list[Drop] = []
        self.hosts = {}

    # -- configuration --------------------------------------------------------

    def add_tap(self, tap: Tap) -> Tap:
        if tap.node is not None:
            if tap.node not in self.nodes:
                raise KeyError(f"tap {tap.id}: unknown node {tap.node}")
            self.node_taps.setdefault(tap.node, []).append(tap)
        else:
            if tap.link not in self.links:
                raise KeyError(f"tap {tap.id}: unknown link {tap.link}")
            self.link_taps.setdefault(tap.link, []).append(tap)
        self.taps.append(tap)
        return tap

    def set_link_state(self, link_id: int, up: bool) -> None:
        """Bring a link up or down; the spanning tree is recomputed."""
        self.topo = self.topo.with_link_state(link_id, up)
        self.links = {l.id: l for l in self.topo.links}
        self.routing = Routing.build(self.topo)

    def reachable(self, src: str, dst: str) -> bool:
        try:
            self.routing.path(src, dst)
            return True
        except Unreachable:
            return False

    def firewalls_on_path(self, src: str, dst: str) -> list[str]:
        nodes, _ = self.routing.path(src, dst)
        return [n for n in nodes if self.nodes[n].kind == "firewall"]

    def permitted(self, src: str, dst: str, port: int) -> bool:
        """Whether a new flow from ``src`` to ``dst:port`` passes every firewall."""
        if not self.reachable(src, dst):
            return False
        if not self.firewalls_on_path(src, dst):
            return True
        return evaluate_rules(self.topo.rules, self.nodes[src].addr, self.nodes[dst].addr, port)

    # -- data path -------------------------------------------------------------

    def enqueue(self, frame: Frame) -> Frame:
        frame = replace(frame, seq=self._seq)
        self._seq += 1
        self.counters["sent"] += frame.count
        try:
            nodes, links = self.routing.path(frame.src, frame.dst)
        except Unreachable:
            self._drop(frame.t_enqueue, "unreachable", frame)
            return frame
        for tap in self.node_taps.get(frame.src, ()):
            tap.records.append((frame.t_enqueue, frame.seq, frame))
        self._push(frame.t_enqueue, 0, frame, nodes, links)
        return frame

    def _push(self, t, hop, frame, nodes, links):
        self._uid += 1
        heapq.heappush(self._heap, (t, frame.seq, hop, self._uid, frame, nodes, links))

    def _drop(self, t: int, reason: str, frame: Frame) -> None:
        self.counters[f"dropped_{reason}"] += frame.count
        self.drops.append(Drop(t, reason, frame))

    def _firewall_pass(self, frame: Frame) -> bool:
        src, dst = self.nodes[frame.src].addr, self.nodes[frame.dst].addr
        key = conn_key(src, frame.sport, dst, frame.dport)
        if frame.flags & SYN and not frame.flags & ACK:
            if evaluate_rules(self.topo.rules, src, dst, frame.dport):
                self.fw_conns.add(key)
                return True
            return False
        if key in self.fw_conns:
            if frame.flags & RST:
                self.fw_conns.discard(key)
            return True
        return evaluate_rules(self.topo.rules, src, dst, frame.dport)

    def step(self, now: int) -> dict[str, list[Frame]]:
        """Advance to ``now``; return frames delivered to each host, in order."""
        if now < self.now:
            raise ValueError("time went backwards")
        self.window_start, self.now = self.now, now
        self._used.clear()
        delivered: dict[str, list[Frame]] = {}
        deferred = []
        heap = self._heap
        while heap and heap[0][0] <= now:
            t, seq, hop, uid, frame, nodes, links = heapq.heappop(heap)
            here = nodes[hop]
            if hop == len(links):
                delivered.setdefault(here, []).append(frame)
                self.counters["delivered"] += frame.count
                for tap in self.node_taps.get(here, ()):
                    tap.records.append((t, seq, frame))
                continue
            if hop > 0 and self.nodes[here].kind == "firewall" and not self._firewall_pass(frame):
                self._drop(t, "firewall", frame)
                continue
            lid = links[hop]
            if lid not in self.routing.active:
                self._drop(t, "link_down", frame)
                continue
            link = self.links[lid]
            slot = (lid, here)
            room = link.capacity - self._used.get(slot, 0)
            if room <= 0:
                deferred.append((t, seq, hop, uid, frame, nodes, links))
                continue
            if frame.count > room:
                deferred.append((t, seq, hop, uid, replace(frame, count=frame.count - room), nodes, links))
                frame = replace(frame, count=room)
            self._used[slot] = self._used.get(slot, 0) + frame.count
            depart = max(t, self.window_start)
            icpt = self.interceptors.get(lid)
            outs = icpt.on_frame(frame, here, depart) if icpt is not None else ((frame, 0),)
            if not outs:
                self._drop(depart, "intercepted", frame)
            for out, extra in outs:
                for tap in self.link_taps.get(lid, ()):
                    tap.records.append((depart + extra, out.seq, out))
                self._push(depart + extra + link.latency_us, hop + 1, out, nodes, links)
        for item in deferred:
            heapq.heappush(heap, item)
        return delivered

    def in_flight(self) -> int:
        return sum(item[4].count for item in self._heap)
