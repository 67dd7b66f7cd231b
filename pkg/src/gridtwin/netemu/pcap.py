"""Classic libpcap output with synthesized Ethernet/IPv4/TCP headers."""
from __future__ import annotations

import ipaddress
import struct
from pathlib import Path

from .network import Frame, Tap
from .topology import Topology

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1
SNAPLEN = 65535
EPOCH_S = 1609459200  # 2021-01-01T00:00:00Z

GLOBAL_HEADER = struct.pack("<IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, SNAPLEN, LINKTYPE_ETHERNET)


def checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def packet_bytes(frame: Frame, topo: Topology, ip_id: int) -> bytes:
    src, dst = topo.node(frame.src), topo.node(frame.dst)
    sip, dip = ipaddress.IPv4Address(src.addr).packed, ipaddress.IPv4Address(dst.addr).packed
    tcp = struct.pack("!HHIIBBHHH", frame.sport, frame.dport, frame.tcp_seq & 0xFFFFFFFF,
                      frame.tcp_ack & 0xFFFFFFFF, 5 << 4, frame.flags, 65535, 0, 0) + frame.payload
    pseudo = sip + dip + struct.pack("!BBH", 0, 6, len(tcp))
    tcp = tcp[:16] + struct.pack("!H", checksum(pseudo + tcp)) + tcp[18:]
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(tcp), ip_id & 0xFFFF, 0x4000, 64, 6, 0, sip, dip)
    ip = ip[:10] + struct.pack("!H", checksum(ip)) + ip[12:]
    return dst.mac + src.mac + b"\x08\x00" + ip + tcp


def pcap_bytes(records, topo: Topology, flood_sample: int = 1) -> bytes:
    """Serialize ``(t_us, seq, frame)`` records; flood bursts are sampled."""
    out = [GLOBAL_HEADER]
    for t, seq, frame in sorted(records, key=lambda r: (r[0], r[1])):
        copies = min(frame.count, flood_sample) if frame.kind == "flood" else 1
        for k in range(copies):
            pkt = packet_bytes(frame, topo, seq + k)
            out.append(struct.pack("<IIII", EPOCH_S + t // 1_000_000, t % 1_000_000, len(pkt), len(pkt)))
            out.append(pkt)
    return b"".join(out)


def write_pcap(tap: Tap, path: str | Path, topo: Topology, flood_sample: int = 1) -> Path:
    path = Path(path)
    path.write_bytes(pcap_bytes(tap.records, topo, flood_sample))
    return path


def read_pcap(path_or_bytes) -> list[tuple[int, bytes]]:
    """Minimal reader for tests and reports: ``(t_us, packet)`` pairs."""
    data = path_or_bytes if isinstance(path_or_bytes, bytes) else Path(path_or_bytes).read_bytes()
    magic, = struct.unpack_from("<I", data)
    if magic != PCAP_MAGIC:
        raise ValueError("not a classic little-endian pcap")
    pos, out = 24, []
    while pos < len(data):
        sec, usec, incl, _ = struct.unpack_from("<IIII", data, pos)
        pos += 16
        out.append(((sec - EPOCH_S) * 1_000_000 + usec, data[pos:pos + incl]))
        pos += incl
    return out


def tcp_payload(packet: bytes) -> tuple[int, int, bytes]:
    """``(sport, dport, payload)`` of a packet produced by :func:`packet_bytes`."""
    ihl = (packet[14] & 0x0F) * 4
    tcp = packet[14 + ihl:]
    sport, dport = struct.unpack_from("!HH", tcp)
    off = (tcp[12] >> 4) * 4
    return sport, dport, tcp[off:]
