"""Static network description: nodes, links, firewall rules and routing."""
from __future__ import annotations

import ipaddress
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Literal

NodeKind = Literal["host", "switch", "firewall"]


class TopologyError(ValueError):
    pass


class Unreachable(TopologyError):
    def __init__(self, src: str, dst: str):
        super().__init__(f"no path from {src} to {dst}")
        self.src, self.dst = src, dst


@dataclass(frozen=True)
class Node:
    id: int
    name: str
    kind: NodeKind = "host"
    addr: str | None = None

    @property
    def mac(self) -> bytes:
        return bytes([2, 0, 0, 0, (self.id >> 8) & 0xFF, self.id & 0xFF])


@dataclass(frozen=True)
class Link:
    id: int
    a: str
    b: str
    latency_us: int = 1000
    capacity: int = 1000  # frames per substep and direction
    up: bool = True

    def other(self, name: str) -> str:
        return self.b if name == self.a else self.a


@dataclass(frozen=True)
class Rule:
    action: Literal["allow", "deny"]
    src: str = "*"
    dst: str = "*"
    port: int | None = None


@lru_cache(maxsize=None)
def _net(pattern: str):
    return ipaddress.ip_network(pattern, strict=False)


def _addr_match(pattern: str, addr: str) -> bool:
    if pattern == "*":
        return True
    return ipaddress.ip_address(addr) in _net(pattern)


def rule_matches(rule: Rule, src: str, dst: str, port: int) -> bool:
    return (_addr_match(rule.src, src) and _addr_match(rule.dst, dst)
            and (rule.port is None or rule.port == port))


def evaluate_rules(rules, src: str, dst: str, port: int) -> bool:
    """First match wins; no match means deny."""
    for rule in rules:
        if rule_matches(rule, src, dst, port):
            return rule.action == "allow"
    return False


@dataclass(frozen=True)
class Topology:
    nodes: tuple[Node, ...]
    links: tuple[Link, ...]
    rules: tuple[Rule, ...] = ()

    def __post_init__(self):
        errors = topology_errors(self)
        if errors:
            raise TopologyError("; ".join(errors))
        object.__setattr__(self, "_by_name", {n.name: n for n in self.nodes})

    def node(self, name: str) -> Node:
        return self._by_name[name]

    def by_addr(self, addr: str) -> Node | None:
        for n in self.nodes:
            if n.addr == addr:
                return n
        return None

    def hosts(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == "host"]

    def with_link_state(self, link_id: int, up: bool) -> "Topology":
        links = tuple(Link(l.id, l.a, l.b, l.latency_us, l.capacity, up) if l.id == link_id else l
                      for l in self.links)
        return Topology(self.nodes, links, self.rules)


def topology_errors(topo: Topology) -> list[str]:
    errors = []
    names = [n.name for n in topo.nodes]
    ids = [n.id for n in topo.nodes]
    addrs = [n.addr for n in topo.nodes if n.addr is not None]
    if len(set(names)) != len(names):
        errors.append("duplicate node names")
    if len(set(ids)) != len(ids):
        errors.append("duplicate node ids")
    if len(set(addrs)) != len(addrs):
        errors.append("duplicate node addresses")
    for n in topo.nodes:
        if n.kind == "host" and n.addr is None:
            errors.append(f"host {n.name} has no address")
        if n.addr is not None:
            try:
                ipaddress.IPv4Address(n.addr)
            except ValueError:
                errors.append(f"node {n.name}: bad address {n.addr!r}")
    link_ids = [l.id for l in topo.links]
    if len(set(link_ids)) != len(link_ids):
        errors.append("duplicate link ids")
    known = set(names)
    for l in topo.links:
        for end in (l.a, l.b):
            if end not in known:
                errors.append(f"link {l.id}: unknown endpoint {end}")
        if l.a == l.b:
            errors.append(f"link {l.id}: self loop")
        if l.latency_us < 0 or l.capacity < 1:
            errors.append(f"link {l.id}: latency must be >= 0 and capacity >= 1")
    for r in topo.rules:
        if r.action not in ("allow", "deny"):
            errors.append(f"firewall rule action {r.action!r}")
        for pat in (r.src, r.dst):
            if pat != "*":
                try:
                    _net(pat)
                except ValueError:
                    errors.append(f"firewall rule address {pat!r}")
    return errors


def spanning_links(topo: Topology) -> tuple[frozenset[int], frozenset[int]]:
    """Active and blocked link ids.

    Kruskal over up links in increasing id order: a link that would close a
    loop is blocked, which for a single ring is its highest-id link.
    """
    parent = {n.name: n.name for n in topo.nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    active, blocked = set(), set()
    for link in sorted(topo.links, key=lambda l: l.id):
        if not link.up:
            continue
        ra, rb = find(link.a), find(link.b)
        if ra == rb:
            blocked.add(link.id)
        else:
            parent[ra] = rb
            active.add(link.id)
    return frozenset(active), frozenset(blocked)


@dataclass
class Routing:
    """Shortest paths over the active tree with lowest-node-id tie-break."""

    topo: Topology
    active: frozenset[int]
    blocked: frozenset[int]
    adjacency: dict[str, list[tuple[int, str, int]]] = field(default_factory=dict)  # name -> [(nbr id, nbr, link id)]
    _cache: dict[tuple[str, str], tuple[tuple[str, ...], tuple[int, ...]] | None] = field(default_factory=dict)

    @classmethod
    def build(cls, topo: Topology) -> "Routing":
        active, blocked = spanning_links(topo)
        r = cls(topo, active, blocked)
        ids = {n.name: n.id for n in topo.nodes}
        r.adjacency = {n.name: [] for n in topo.nodes}
        for link in topo.links:
            if link.id in active:
                r.adjacency[link.a].append((ids[link.b], link.b, link.id))
                r.adjacency[link.b].append((ids[link.a], link.a, link.id))
        for nbrs in r.adjacency.values():
            nbrs.sort()
        return r

    def path(self, src: str, dst: str) -> tuple[tuple[str, ...], tuple[int, ...]]:
        """Node names and link ids from ``src`` to ``dst``; raises Unreachable."""
        key = (src, dst)
        if key not in self._cache:
            self._cache[key] = self._bfs(src, dst)
        found = self._cache[key]
        if found is None:
            raise Unreachable(src, dst)
        return found

    def _bfs(self, src, dst):
        prev: dict[str, tuple[str, int] | None] = {src: None}
        queue = deque([src])
        while queue:
            cur = queue.popleft()
            if cur == dst:
                break
            if cur != src and self.topo.node(cur).kind == "host":
                continue  # hosts do not forward
            for _, nbr, lid in self.adjacency[cur]:
                if nbr not in prev:
                    prev[nbr] = (cur, lid)
                    queue.append(nbr)
        if dst not in prev:
            return None
        nodes, links = [dst], []
        while prev[nodes[-1]] is not None:
            p, lid = prev[nodes[-1]]
            nodes.append(p)
            links.append(lid)
        return tuple(reversed(nodes)), tuple(reversed(links))


# -- the reference laboratory -------------------------------------------------

CONTROL_SUBNET = "10.0.1.0/24"
FIELD_SUBNET = "10.0.2.0/24"

IED_NAMES = ("ied_sub", "ied_load1", "ied_load2", "ied_load3", "ied_pv1", "ied_pv2", "ied_bss")


def reference_topology(latency_us: int = 1000, capacity: int = 1000, rules: tuple[Rule, ...] | None = None,
                       down: tuple[int, ...] = ()) -> Topology:
    """Control room behind a firewall, four switches in a ring, field devices.

    Node ids and link ids are stable; the ring is links 5..8 (sw1-sw2,
    sw2-sw3, sw3-sw4, sw4-sw1).
    """
    nodes = [
        Node(1, "mtu", "host", "10.0.1.10"),
        Node(2, "workstation", "host", "10.0.1.20"),
        Node(3, "fileserver", "host", "10.0.1.30"),
        Node(4, "sw_cr", "switch"),
        Node(5, "fw", "firewall"),
        Node(6, "sw1", "switch"),
        Node(7, "sw2", "switch"),
        Node(8, "sw3", "switch"),
        Node(9, "sw4", "switch"),
        Node(10, "vrtu", "host", "10.0.2.20"),
        Node(11, "attacker_field", "host", "10.0.2.66"),
    ]
    for k, name in enumerate(IED_NAMES):
        nodes.append(Node(12 + k, name, "host", f"10.0.2.{101 + k}"))
    pairs = [("mtu", "sw_cr"), ("workstation", "sw_cr"), ("fileserver", "sw_cr"), ("sw_cr", "fw"), ("fw", "sw1"),
             ("sw1", "sw2"), ("sw2", "sw3"), ("sw3", "sw4"), ("sw4", "sw1"),
             ("vrtu", "sw2"), ("attacker_field", "sw2")]
    pairs += [(name, "sw3") for name in IED_NAMES[:4]]
    pairs += [(name, "sw4") for name in IED_NAMES[4:]]
    links = tuple(Link(i, a, b, latency_us, capacity, i not in down) for i, (a, b) in enumerate(pairs))
    if rules is None:
        rules = default_rules()
    return Topology(tuple(nodes), links, tuple(rules))


def default_rules() -> tuple[Rule, ...]:
    """Control room reaches the process network on 2404 only."""
    return (Rule("allow", "10.0.1.10", "10.0.2.20", 2404), Rule("deny"))
