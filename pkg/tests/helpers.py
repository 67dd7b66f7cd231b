"""Shared helpers for the scenario-level tests."""
from __future__ import annotations

import struct

import yaml

from gridtwin.cosim import load_config, parse_config, resolve_scenario
from gridtwin.iec104 import split_stream as iec_split
from gridtwin.modbus import split_stream as mb_split
from gridtwin.netemu import read_pcap

US = 1_000_000

# acceptance verdict lines, printed in the terminal summary
VERDICTS: dict[int, str] = {}


def verdict(n: int, checks: list[tuple[str, bool, str]]) -> bool:
    """Record ``criterion n: PASS|FAIL`` with each sub-check's evidence."""
    ok = all(passed for _, passed, _ in checks)
    parts = "; ".join(f"{name}{'' if passed else ' [FAIL]'}: {detail}" for name, passed, detail in checks)
    VERDICTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {parts}"
    print(VERDICTS[n])
    return ok


def shipped(name: str, duration=None, seed=None):
    return load_config(resolve_scenario(name)).with_overrides(seed, duration)


def scenario_doc(name: str) -> dict:
    return yaml.safe_load(resolve_scenario(name).read_text())


def config_from(doc: dict, **run):
    doc = dict(doc)
    doc["run"] = {**doc.get("run", {}), **run}
    return parse_config(yaml.safe_dump(doc), "test.scenario")


def with_stages(name: str, stages: list[dict], duration: float, footholds=None, **sections):
    doc = scenario_doc(name)
    doc["attack"] = {"footholds": footholds or ["attacker_field"], "stages": stages}
    for key, value in sections.items():
        doc[key] = value
    return config_from(doc, duration_s=duration)


def packets(pcap_bytes_or_path):
    """``(t_us, src_ip, dst_ip, sport, dport, flags, seq, payload)`` per captured packet."""
    out = []
    for t, pkt in read_pcap(pcap_bytes_or_path):
        ihl = (pkt[14] & 0x0F) * 4
        src, dst = pkt[26:30], pkt[30:34]
        tcp = pkt[14 + ihl:]
        sport, dport, seq = struct.unpack_from("!HHI", tcp)
        flags = tcp[13]
        payload = tcp[(tcp[12] >> 4) * 4:]
        out.append((t, ".".join(map(str, src)), ".".join(map(str, dst)), sport, dport, flags, seq, payload))
    return out


def reassemble(pkts, port: int) -> dict[tuple, bytes]:
    """Concatenate in-order payload per direction for flows touching ``port``.

    Segments repeated at a node tap (none in practice) are skipped by
    tracking the next expected sequence number per direction.
    """
    streams: dict[tuple, bytearray] = {}
    nxt: dict[tuple, int] = {}
    for _, src, dst, sport, dport, flags, seq, payload in pkts:
        if port not in (sport, dport) or not payload:
            continue
        key = (src, sport, dst, dport)
        if key in nxt and seq != nxt[key]:
            continue
        streams.setdefault(key, bytearray()).extend(payload)
        nxt[key] = (seq + len(payload)) & 0xFFFFFFFF
    return {k: bytes(v) for k, v in streams.items()}


def decode_all(streams: dict[tuple, bytes], protocol: str):
    """Every frame of every stream; returns (frames per stream, error list)."""
    split = iec_split if protocol == "iec104" else mb_split
    frames, errors = {}, []
    for key, data in streams.items():
        items, rest = split(data)
        bad = [i for i in items if isinstance(i, Exception)]
        errors += [(key, repr(b)) for b in bad]
        frames[key] = [i for i in items if not isinstance(i, Exception)]
        # a capture may end mid-frame only if the run stopped with bytes in flight
        if rest and len(rest) > 260:
            errors.append((key, f"{len(rest)} trailing bytes"))
    return frames, errors
