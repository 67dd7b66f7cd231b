"""Deterministic emulated packet network."""
from .network import ACK, FIN, MAX_SEGMENT, PSH, RST, SYN, Drop, Frame, Interceptor, Network, Tap, conn_key
from .pcap import EPOCH_S, packet_bytes, pcap_bytes, read_pcap, tcp_payload, write_pcap
from .stack import ConnectBlocked, HostStack, ProbeReply, Stream, StreamClosed, StreamError, attach_hosts
from .topology import (IED_NAMES, Link, Node, Routing, Rule, Topology, TopologyError, Unreachable, default_rules,
                       evaluate_rules, reference_topology, spanning_links)


def build_network(topo: Topology, seed: int = 0, required_pairs=()) -> Network:
    """Network with a host stack on every host node.

    ``required_pairs`` are (src, dst) host pairs that declared streams will
    use; an unreachable pair raises :class:`Unreachable`.
    """
    net = Network(topo)
    attach_hosts(net, seed)
    for src, dst in required_pairs:
        net.routing.path(src, dst)
    return net
