"""Byte-exact IEC 60870-5-104 APDU codec for a closed ASDU subset.

Field widths follow the common 104 profile: 2-octet cause of transmission
(cause + originator), 2-octet common address, 3-octet IOA.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

START = 0x68
MAX_ASDU_LEN = 249
SEQ_MOD = 32768

M_SP_NA_1 = 1
M_ME_NC_1 = 13
C_SC_NA_1 = 45
C_SE_NC_1 = 50
C_IC_NA_1 = 100
SUPPORTED_TYPES = (M_SP_NA_1, M_ME_NC_1, C_SC_NA_1, C_SE_NC_1, C_IC_NA_1)
TYPE_NAMES = {M_SP_NA_1: "M_SP_NA_1", M_ME_NC_1: "M_ME_NC_1", C_SC_NA_1: "C_SC_NA_1",
              C_SE_NC_1: "C_SE_NC_1", C_IC_NA_1: "C_IC_NA_1"}

# causes of transmission
COT_PERIODIC = 1
COT_SPONTANEOUS = 3
COT_ACTIVATION = 6
COT_ACT_CON = 7
COT_ACT_TERM = 10
COT_INTERROGATED = 20
COT_UNKNOWN_TYPE = 44
COT_UNKNOWN_COT = 45
COT_UNKNOWN_CA = 46
COT_UNKNOWN_IOA = 47

QOI_STATION = 20


class Iec104Error(ValueError):
    """Base class for decode/encode failures."""

    consumed = 0


class FramingError(Iec104Error):
    pass


class NeedMoreBytes(Iec104Error):
    def __init__(self, needed: int):
        super().__init__(f"need {needed} more bytes")
        self.needed = needed


class UnknownTypeId(Iec104Error):
    def __init__(self, type_id: int, consumed: int):
        super().__init__(f"unsupported type id {type_id}")
        self.type_id = type_id
        self.consumed = consumed


class OversizeAsdu(Iec104Error):
    pass


class UFunction(Enum):
    STARTDT_ACT = 0x04
    STARTDT_CON = 0x08
    STOPDT_ACT = 0x10
    STOPDT_CON = 0x20
    TESTFR_ACT = 0x40
    TESTFR_CON = 0x80


@dataclass(frozen=True)
class InfoObject:
    ioa: int
    value: float | bool | int
    quality: int = 0


@dataclass(frozen=True)
class Asdu:
    type_id: int
    cot: int
    common_addr: int
    objects: tuple[InfoObject, ...]
    originator: int = 0
    negative: bool = False
    test: bool = False
    sq: bool = False

    def __post_init__(self):
        if self.type_id not in SUPPORTED_TYPES:
            raise UnknownTypeId(self.type_id, 0)
        if not self.objects:
            raise Iec104Error("ASDU needs at least one information object")
        if not 0 <= self.cot < 64:
            raise Iec104Error(f"cause of transmission {self.cot} out of range")
        if not 0 <= self.common_addr <= 65535:
            raise Iec104Error("common address out of range")
        if not 0 <= self.originator <= 255:
            raise Iec104Error("originator out of range")
        if len(self.objects) > 127:
            raise Iec104Error("at most 127 information objects per ASDU")
        for obj in self.objects:
            if not 0 <= obj.ioa <= 0xFFFFFF:
                raise Iec104Error(f"IOA {obj.ioa} out of range")
        if self.sq:
            base = self.objects[0].ioa
            if any(o.ioa != base + k for k, o in enumerate(self.objects)):
                raise Iec104Error("SQ=1 requires contiguous IOAs")

    @property
    def name(self) -> str:
        return TYPE_NAMES[self.type_id]


@dataclass(frozen=True)
class Apdu:
    format: str  # "I", "S" or "U"
    send_seq: int = 0
    recv_seq: int = 0
    u_function: UFunction | None = None
    asdu: Asdu | None = None

    def __post_init__(self):
        if self.format not in ("I", "S", "U"):
            raise Iec104Error(f"bad APDU format {self.format!r}")
        if not (0 <= self.send_seq < SEQ_MOD and 0 <= self.recv_seq < SEQ_MOD):
            raise Iec104Error("sequence number out of range")
        if (self.format == "I") != (self.asdu is not None):
            raise Iec104Error("I-format carries exactly one ASDU; S/U carry none")
        if (self.format == "U") != (self.u_function is not None):
            raise Iec104Error("U-format needs a function")


def i_frame(send_seq: int, recv_seq: int, asdu: Asdu) -> Apdu:
    return Apdu("I", send_seq, recv_seq, asdu=asdu)


def s_frame(recv_seq: int) -> Apdu:
    return Apdu("S", recv_seq=recv_seq)


def u_frame(fn: UFunction) -> Apdu:
    return Apdu("U", u_function=fn)


# -- information elements ----------------------------------------------------

def _encode_element(type_id: int, obj: InfoObject) -> bytes:
    q = obj.quality & 0xFF
    if type_id == M_SP_NA_1:
        return bytes([(q & 0xF0) | (1 if obj.value else 0)])
    if type_id == M_ME_NC_1:
        return struct.pack("<fB", obj.value, q)
    if type_id == C_SC_NA_1:
        return bytes([(q & 0xFE) | (1 if obj.value else 0)])
    if type_id == C_SE_NC_1:
        return struct.pack("<fB", obj.value, q)
    if type_id == C_IC_NA_1:
        return bytes([int(obj.value) & 0xFF])
    raise UnknownTypeId(type_id, 0)


ELEMENT_SIZE = {M_SP_NA_1: 1, M_ME_NC_1: 5, C_SC_NA_1: 1, C_SE_NC_1: 5, C_IC_NA_1: 1}


def _decode_element(type_id: int, ioa: int, raw: bytes) -> InfoObject:
    if type_id == M_SP_NA_1:
        return InfoObject(ioa, bool(raw[0] & 0x01), raw[0] & 0xF0)
    if type_id in (M_ME_NC_1, C_SE_NC_1):
        value, q = struct.unpack("<fB", raw)
        return InfoObject(ioa, value, q)
    if type_id == C_SC_NA_1:
        return InfoObject(ioa, bool(raw[0] & 0x01), raw[0] & 0xFE)
    return InfoObject(ioa, raw[0], 0)


def encode_asdu(asdu: Asdu) -> bytes:
    vsq = (0x80 if asdu.sq else 0) | len(asdu.objects)
    cot = asdu.cot | (0x40 if asdu.negative else 0) | (0x80 if asdu.test else 0)
    out = bytearray([asdu.type_id, vsq, cot, asdu.originator])
    out += struct.pack("<H", asdu.common_addr)
    for k, obj in enumerate(asdu.objects):
        if k == 0 or not asdu.sq:
            out += obj.ioa.to_bytes(3, "little")
        out += _encode_element(asdu.type_id, obj)
    if len(out) > MAX_ASDU_LEN:
        raise OversizeAsdu(f"ASDU of {len(out)} bytes exceeds {MAX_ASDU_LEN}")
    return bytes(out)


def decode_asdu(data: bytes, consumed: int = 0) -> Asdu:
    if len(data) < 6:
        raise FramingError("ASDU header truncated")
    type_id, vsq, cot_byte, originator = data[0], data[1], data[2], data[3]
    if type_id not in SUPPORTED_TYPES:
        raise UnknownTypeId(type_id, consumed)
    common_addr = struct.unpack_from("<H", data, 4)[0]
    sq = bool(vsq & 0x80)
    count = vsq & 0x7F
    if count == 0:
        raise FramingError("ASDU without information objects")
    size = ELEMENT_SIZE[type_id]
    expected = 6 + (3 + size * count if sq else (3 + size) * count)
    if len(data) != expected:
        raise FramingError(f"ASDU length {len(data)} does not match {count} objects (expected {expected})")
    pos = 6
    objects = []
    ioa = 0
    for k in range(count):
        if k == 0 or not sq:
            ioa = int.from_bytes(data[pos:pos + 3], "little")
            pos += 3
        else:
            ioa += 1
        objects.append(_decode_element(type_id, ioa, data[pos:pos + size]))
        pos += size
    if sq and ioa > 0xFFFFFF:
        raise FramingError("SQ run overflows IOA range")
    return Asdu(type_id, cot_byte & 0x3F, common_addr, tuple(objects), originator,
                negative=bool(cot_byte & 0x40), test=bool(cot_byte & 0x80), sq=sq)


# -- APDU --------------------------------------------------------------------

def encode_apdu(apdu: Apdu) -> bytes:
    if apdu.format == "I":
        body = encode_asdu(apdu.asdu)
        ctrl = struct.pack("<HH", (apdu.send_seq << 1) & 0xFFFF, (apdu.recv_seq << 1) & 0xFFFF)
    elif apdu.format == "S":
        body = b""
        ctrl = bytes([0x01, 0x00]) + struct.pack("<H", (apdu.recv_seq << 1) & 0xFFFF)
    else:
        body = b""
        ctrl = bytes([0x03 | apdu.u_function.value, 0, 0, 0])
    return bytes([START, 4 + len(body)]) + ctrl + body


def read_apdu(buf: bytes) -> tuple[Apdu, int]:
    """Decode the first APDU in ``buf``; return it with the bytes consumed.

    Raises :class:`NeedMoreBytes` on a partial frame. Errors raised for a
    complete but invalid frame carry ``consumed`` so a stream reader can
    skip it.
    """
    if not buf:
        raise NeedMoreBytes(2)
    if buf[0] != START:
        raise FramingError(f"bad start byte 0x{buf[0]:02X}")
    if len(buf) < 2:
        raise NeedMoreBytes(1)
    length = buf[1]
    total = 2 + length
    if length < 4:
        err = FramingError(f"APDU length {length} < 4")
        err.consumed = total
        raise err
    if length > 4 + MAX_ASDU_LEN:
        err = FramingError(f"APDU length {length} exceeds maximum")
        err.consumed = total
        raise err
    if len(buf) < total:
        raise NeedMoreBytes(total - len(buf))
    c1, c2, c3, c4 = buf[2:6]
    try:
        if c1 & 0x01 == 0:
            send_seq = ((c2 << 8) | c1) >> 1
            recv_seq = ((c4 << 8) | c3) >> 1
            if length == 4:
                raise FramingError("I-format frame without ASDU")
            asdu = decode_asdu(bytes(buf[6:total]), total)
            return Apdu("I", send_seq, recv_seq, asdu=asdu), total
        if length != 4:
            raise FramingError("S/U-format frame must have length 4")
        if c1 & 0x03 == 0x01:
            if c1 != 0x01 or c2 != 0 or c3 & 0x01:
                raise FramingError("malformed S-format control field")
            return Apdu("S", recv_seq=((c4 << 8) | c3) >> 1), total
        fn_bits = c1 & 0xFC
        try:
            fn = UFunction(fn_bits)
        except ValueError:
            raise FramingError(f"U-format needs exactly one function bit, got 0x{c1:02X}") from None
        if c2 or c3 or c4:
            raise FramingError("malformed U-format control field")
        return Apdu("U", u_function=fn), total
    except Iec104Error as err:
        err.consumed = total
        raise


def decode_apdu(data: bytes) -> Apdu:
    """Decode exactly one APDU; trailing bytes are a length mismatch."""
    apdu, used = read_apdu(data)
    if used != len(data):
        err = FramingError(f"length mismatch: frame is {used} bytes, buffer {len(data)}")
        err.consumed = used
        raise err
    return apdu


def split_stream(buf: bytes) -> tuple[list[Apdu | Iec104Error], bytes]:
    """Decode every complete frame in a stream buffer.

    Returns decoded APDUs (or the error for a skipped bad frame) and the
    unconsumed remainder. On a framing error without a known length the
    rest of the buffer is dropped.
    """
    out: list[Apdu | Iec104Error] = []
    pos = 0
    while pos < len(buf):
        try:
            apdu, used = read_apdu(buf[pos:])
        except NeedMoreBytes:
            break
        except Iec104Error as err:
            out.append(err)
            if err.consumed:
                pos += err.consumed
                continue
            pos = len(buf)
            break
        out.append(apdu)
        pos += used
    return out, bytes(buf[pos:])
