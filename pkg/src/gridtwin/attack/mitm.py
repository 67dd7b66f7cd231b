"""On-path interceptor that decodes, rewrites and re-encodes stream payloads.

The interceptor behaves like a transparent proxy on one link: for each
direction of each TCP connection it reassembles the byte stream, splits
complete protocol frames, applies the first matching rule to each, and
forwards the result with TCP sequence numbers shifted so that both ends
keep a consistent view. Dropping an IEC 104 I-frame also renumbers N(S)
and N(R) so the link layer does not detect the gap.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace

from ..iec104 import IEC104_PORT, Apdu, Iec104Error, InfoObject, encode_apdu, read_apdu
from ..iec104.codec import SEQ_MOD, NeedMoreBytes
from ..modbus import (MODBUS_PORT, READ_HOLDING_REGISTERS, WRITE_MULTIPLE_REGISTERS, ModbusAdu, ModbusError,
                      ModbusNeedMoreBytes, encode_adu, float_to_regs, read_adu, regs_to_float)
from ..netemu import MAX_SEGMENT, SYN, Frame

ACTIONS = ("replace", "scale", "drop", "delay", "restore")
PROTOCOLS = {"iec104": IEC104_PORT, "modbus": MODBUS_PORT}
IEC_FIELDS = {"type_id", "ca", "ioa", "cot"}
MODBUS_FIELDS = {"function", "unit", "register"}


class RuleError(ValueError):
    pass


@dataclass(frozen=True)
class RewriteRule:
    protocol: str
    action: str
    to: str | None = None  # destination host; None matches both directions
    type_id: int | None = None
    ca: int | None = None
    ioa: int | None = None
    cot: int | None = None
    function: int | None = None
    unit: int | None = None
    register: int | None = None
    value: float = 0.0  # constant for replace, factor for scale
    delay_ms: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "RewriteRule":
        errors = rule_errors(d)
        if errors:
            raise RuleError("; ".join(errors))
        return cls(**d)


def rule_errors(d: dict) -> list[str]:
    errors = []
    known = set(RewriteRule.__dataclass_fields__)
    for key in d:
        if key not in known:
            errors.append(f"unknown rule field {key!r}")
    proto = d.get("protocol")
    if proto not in PROTOCOLS:
        errors.append(f"unsupported protocol {proto!r}")
    elif proto == "iec104" and MODBUS_FIELDS & set(d):
        errors.append(f"iec104 rule cannot match {sorted(MODBUS_FIELDS & set(d))}")
    elif proto == "modbus" and IEC_FIELDS & set(d):
        errors.append(f"modbus rule cannot match {sorted(IEC_FIELDS & set(d))}")
    if d.get("action") not in ACTIONS:
        errors.append(f"unknown rule action {d.get('action')!r}")
    if d.get("action") == "delay" and not d.get("delay_ms", 0) > 0:
        errors.append("delay rule needs delay_ms > 0")
    return errors


@dataclass
class _Direction:
    in_nxt: int | None = None
    out_nxt: int | None = None
    buf: bytes = b""
    ns_shift: int = 0  # I-frames removed in this direction
    release_t: int = 0

    @property
    def delta(self) -> int:
        if self.in_nxt is None:
            return 0
        return self.out_nxt - self.in_nxt


@dataclass
class RewriteRecord:
    t: int
    protocol: str
    action: str
    key: tuple
    old: float | None
    new: float | None


class Interceptor:
    def __init__(self, rules: list[RewriteRule], on_rewrite=None):
        self.rules = list(rules)
        self.dirs: dict[tuple, _Direction] = {}
        self.originals: dict[tuple, float] = {}
        self.modbus_reads: dict[tuple, int] = {}  # (conn, tid) -> start register
        self.records: list[RewriteRecord] = []
        self.on_rewrite = on_rewrite
        self.active = True

    # -- network hook ---------------------------------------------------------------

    def on_frame(self, frame: Frame, from_node: str, t: int) -> list[tuple[Frame, int]]:
        if frame.kind != "segment":
            return [(frame, 0)]
        proto = self._protocol(frame)
        fwd_key = (frame.src, frame.sport, frame.dst, frame.dport)
        rev_key = (frame.dst, frame.dport, frame.src, frame.sport)
        d = self.dirs.setdefault(fwd_key, _Direction())
        rev = self.dirs.get(rev_key)
        if frame.flags & SYN:
            d.in_nxt = d.out_nxt = frame.tcp_seq + 1
            d.buf, d.ns_shift = b"", 0
        elif d.in_nxt is None:  # installed mid-connection
            d.in_nxt = d.out_nxt = frame.tcp_seq
        ack = frame.tcp_ack - (rev.delta if rev is not None else 0)
        if not frame.payload or proto is None or d.in_nxt != frame.tcp_seq:
            out = replace(frame, tcp_seq=frame.tcp_seq + d.delta, tcp_ack=ack)
            return [(out, self._fifo(d, t, 0))]
        if not (self.active and any(r.protocol == proto for r in self.rules)) and not d.buf and not d.ns_shift and not (rev and rev.ns_shift):
            out = replace(frame, tcp_seq=d.out_nxt, tcp_ack=ack)
            d.in_nxt += len(frame.payload)
            d.out_nxt += len(frame.payload)
            return [(out, self._fifo(d, t, 0))]
        data = d.buf + frame.payload
        d.in_nxt += len(frame.payload)
        if proto == "iec104":
            payload, d.buf, delay = self._rewrite_iec104(data, frame, d, rev, t)
        else:
            payload, d.buf, delay = self._rewrite_modbus(data, frame, t)
        outs = []
        for off in range(0, len(payload), MAX_SEGMENT):
            chunk = payload[off:off + MAX_SEGMENT]
            outs.append((replace(frame, tcp_seq=d.out_nxt, tcp_ack=ack, payload=chunk), self._fifo(d, t, delay)))
            d.out_nxt += len(chunk)
        return outs

    def _fifo(self, d: _Direction, t: int, delay: int) -> int:
        extra = max(delay, d.release_t - t)
        d.release_t = t + extra
        return extra

    def _protocol(self, frame: Frame) -> str | None:
        for name, port in PROTOCOLS.items():
            if port in (frame.sport, frame.dport):
                return name
        return None

    def _rules_for(self, proto: str, frame: Frame):
        if not self.active:  # keep renumbering, stop rewriting
            return []
        return [r for r in self.rules if r.protocol == proto and (r.to is None or r.to == frame.dst)]

    def _record(self, t, proto, action, key, old, new):
        rec = RewriteRecord(t, proto, action, key, old, new)
        self.records.append(rec)
        if self.on_rewrite is not None:
            self.on_rewrite(rec)

    def _apply_value(self, rule: RewriteRule, key: tuple, old: float) -> float:
        if rule.action == "replace":
            new = rule.value
        elif rule.action == "scale":
            new = old * rule.value
        else:  # restore
            new = self.originals.get(key, old)
        if rule.action in ("replace", "scale"):
            self.originals[key] = old
        return struct.unpack("<f", struct.pack("<f", new))[0]

    # -- IEC 104 ----------------------------------------------------------------------

    def _rewrite_iec104(self, data: bytes, frame: Frame, d: _Direction, rev, t: int):
        rules = self._rules_for("iec104", frame)
        out, pos, delay = [], 0, 0
        while pos < len(data):
            try:
                apdu, used = read_apdu(data[pos:])
            except NeedMoreBytes:
                break
            except Iec104Error as err:
                used = err.consumed or len(data) - pos
                out.append(data[pos:pos + used])
                pos += used
                continue
            raw = data[pos:pos + used]
            pos += used
            keep, apdu, changed, extra = self._iec104_apdu(apdu, rules, t)
            delay = max(delay, extra)
            if not keep:
                d.ns_shift += 1
                continue
            if apdu.format == "I":
                apdu = replace(apdu, send_seq=(apdu.send_seq - d.ns_shift) % SEQ_MOD)
            if apdu.format in ("I", "S") and rev is not None and rev.ns_shift:
                apdu = replace(apdu, recv_seq=(apdu.recv_seq + rev.ns_shift) % SEQ_MOD)
            if changed or d.ns_shift or (rev is not None and rev.ns_shift):
                raw = encode_apdu(apdu)
            out.append(raw)
        return b"".join(out), data[pos:], delay

    def _iec104_apdu(self, apdu: Apdu, rules, t: int):
        if apdu.format != "I" or not rules:
            return True, apdu, False, 0
        asdu = apdu.asdu
        objects = list(asdu.objects)
        changed, delay = False, 0
        for rule in rules:
            if rule.type_id is not None and rule.type_id != asdu.type_id:
                continue
            if rule.ca is not None and rule.ca != asdu.common_addr:
                continue
            if rule.cot is not None and rule.cot != asdu.cot:
                continue
            hits = [k for k, o in enumerate(objects) if rule.ioa is None or o.ioa == rule.ioa]
            if not hits:
                continue
            if rule.action == "drop":
                self._record(t, "iec104", "drop", (asdu.common_addr, objects[hits[0]].ioa), None, None)
                return False, apdu, False, 0
            if rule.action == "delay":
                delay = max(delay, int(rule.delay_ms * 1000))
                self._record(t, "iec104", "delay", (asdu.common_addr, objects[hits[0]].ioa), None, None)
                continue
            if not isinstance(objects[hits[0]].value, float):
                continue
            for k in hits:
                obj = objects[k]
                key = (asdu.common_addr, obj.ioa)
                new = self._apply_value(rule, key, obj.value)
                if new != obj.value:
                    objects[k] = InfoObject(obj.ioa, new, obj.quality)
                    changed = True
                    self._record(t, "iec104", rule.action, key, obj.value, new)
            break  # first value rule wins
        if changed:
            apdu = replace(apdu, asdu=replace(asdu, objects=tuple(objects)))
        return True, apdu, changed, delay

    # -- Modbus -------------------------------------------------------------------------

    def _rewrite_modbus(self, data: bytes, frame: Frame, t: int):
        rules = self._rules_for("modbus", frame)
        out, pos, delay = [], 0, 0
        conn = (frame.src, frame.sport, frame.dst, frame.dport) if frame.dport == MODBUS_PORT else \
            (frame.dst, frame.dport, frame.src, frame.sport)
        while pos < len(data):
            try:
                adu, used = read_adu(data[pos:])
            except ModbusNeedMoreBytes:
                break
            except ModbusError as err:
                used = err.consumed or len(data) - pos
                out.append(data[pos:pos + used])
                pos += used
                continue
            raw = data[pos:pos + used]
            pos += used
            request = frame.dport == MODBUS_PORT
            if request and adu.function == READ_HOLDING_REGISTERS and len(adu.data) == 4:
                self.modbus_reads[(conn, adu.transaction_id)] = struct.unpack(">H", adu.data[:2])[0]
            keep, new_adu, extra = self._modbus_adu(adu, conn, request, rules, t)
            delay = max(delay, extra)
            if not keep:
                continue
            out.append(encode_adu(new_adu) if new_adu is not adu else raw)
        return b"".join(out), data[pos:], delay

    def _modbus_adu(self, adu: ModbusAdu, conn, request: bool, rules, t: int):
        regs, start, prefix = None, None, b""
        if adu.function == WRITE_MULTIPLE_REGISTERS and request and len(adu.data) > 5:
            start = struct.unpack(">H", adu.data[:2])[0]
            prefix = adu.data[:5]
            regs = list(struct.unpack_from(f">{adu.data[4] // 2}H", adu.data, 5))
        elif adu.function == READ_HOLDING_REGISTERS and not request and not adu.is_exception:
            start = self.modbus_reads.pop((conn, adu.transaction_id), None)
            prefix = adu.data[:1]
            regs = list(struct.unpack_from(f">{adu.data[0] // 2}H", adu.data, 1))
        delay = 0
        for rule in rules:
            if rule.function is not None and rule.function != adu.function:
                continue
            if rule.unit is not None and rule.unit != adu.unit_id:
                continue
            if rule.register is not None:
                if regs is None or start is None or not start <= rule.register <= start + len(regs) - 2:
                    continue
            key = ("modbus", adu.unit_id, rule.register)
            if rule.action == "drop":
                self._record(t, "modbus", "drop", key, None, None)
                return False, adu, 0
            if rule.action == "delay":
                delay = max(delay, int(rule.delay_ms * 1000))
                self._record(t, "modbus", "delay", key, None, None)
                continue
            if rule.register is None or regs is None:
                continue
            k = rule.register - start
            old = regs_to_float(regs[k:k + 2])
            new = self._apply_value(rule, key, old)
            if new != old:
                regs[k:k + 2] = float_to_regs(new)
                self._record(t, "modbus", rule.action, key, old, new)
                adu = replace(adu, data=prefix + struct.pack(f">{len(regs)}H", *regs))
            break
        return True, adu, delay
