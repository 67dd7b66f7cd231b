"""Modbus TCP framing (MBAP + PDU) for holding-register function codes."""
from __future__ import annotations

import struct
from dataclasses import dataclass

MODBUS_PORT = 502

READ_HOLDING_REGISTERS = 0x03
WRITE_SINGLE_REGISTER = 0x06
WRITE_MULTIPLE_REGISTERS = 0x10
SUPPORTED_FUNCTIONS = (READ_HOLDING_REGISTERS, WRITE_SINGLE_REGISTER, WRITE_MULTIPLE_REGISTERS)

EXC_ILLEGAL_FUNCTION = 0x01
EXC_ILLEGAL_ADDRESS = 0x02
EXC_ILLEGAL_VALUE = 0x03
EXC_DEVICE_FAILURE = 0x04

MBAP_LEN = 7
MAX_PDU = 253


class ModbusError(ValueError):
    consumed = 0


class ModbusFramingError(ModbusError):
    pass


class ModbusNeedMoreBytes(ModbusError):
    def __init__(self, needed: int):
        super().__init__(f"need {needed} more bytes")
        self.needed = needed


class UnsupportedFunction(ModbusError):
    """Decodable frame with a function code outside the supported set."""

    def __init__(self, adu: "ModbusAdu", consumed: int):
        super().__init__(f"unsupported function code 0x{adu.function:02X}")
        self.adu = adu
        self.consumed = consumed


@dataclass(frozen=True)
class ModbusAdu:
    transaction_id: int
    unit_id: int
    function: int
    data: bytes
    protocol_id: int = 0

    @property
    def is_exception(self) -> bool:
        return bool(self.function & 0x80)

    @property
    def exception_code(self) -> int | None:
        return self.data[0] if self.is_exception and self.data else None


# -- PDU builders -------------------------------------------------------------

def read_request(tid: int, unit: int, address: int, quantity: int) -> ModbusAdu:
    return ModbusAdu(tid, unit, READ_HOLDING_REGISTERS, struct.pack(">HH", address, quantity))


def read_response(tid: int, unit: int, registers: list[int]) -> ModbusAdu:
    return ModbusAdu(tid, unit, READ_HOLDING_REGISTERS,
                     bytes([2 * len(registers)]) + struct.pack(f">{len(registers)}H", *registers))


def write_single(tid: int, unit: int, address: int, value: int) -> ModbusAdu:
    return ModbusAdu(tid, unit, WRITE_SINGLE_REGISTER, struct.pack(">HH", address, value))


def write_multiple(tid: int, unit: int, address: int, registers: list[int]) -> ModbusAdu:
    n = len(registers)
    return ModbusAdu(tid, unit, WRITE_MULTIPLE_REGISTERS,
                     struct.pack(">HHB", address, n, 2 * n) + struct.pack(f">{n}H", *registers))


def write_multiple_response(tid: int, unit: int, address: int, quantity: int) -> ModbusAdu:
    return ModbusAdu(tid, unit, WRITE_MULTIPLE_REGISTERS, struct.pack(">HH", address, quantity))


def exception_response(tid: int, unit: int, function: int, code: int) -> ModbusAdu:
    return ModbusAdu(tid, unit, (function | 0x80) & 0xFF, bytes([code]))


def response_registers(adu: ModbusAdu) -> list[int]:
    count = adu.data[0] // 2
    return list(struct.unpack_from(f">{count}H", adu.data, 1))


def write_request_fields(adu: ModbusAdu) -> tuple[int, list[int]]:
    """Start address and register values of a 0x06 or 0x10 request."""
    if adu.function == WRITE_SINGLE_REGISTER:
        addr, value = struct.unpack(">HH", adu.data[:4])
        return addr, [value]
    addr, qty, _ = struct.unpack(">HHB", adu.data[:5])
    return addr, list(struct.unpack_from(f">{qty}H", adu.data, 5))


# -- float transport ----------------------------------------------------------

def float_to_regs(value: float) -> list[int]:
    """IEEE-754 single in two registers, high word first."""
    hi, lo = struct.unpack(">HH", struct.pack(">f", value))
    return [hi, lo]


def regs_to_float(regs) -> float:
    return struct.unpack(">f", struct.pack(">HH", regs[0], regs[1]))[0]


# -- codec --------------------------------------------------------------------

def _valid_data(function: int, data: bytes) -> bool:
    n = len(data)
    if function & 0x80:
        return n == 1
    if function == READ_HOLDING_REGISTERS:
        # request: addr+qty; response: byte count + registers
        return n == 4 or (n >= 1 and data[0] == n - 1 and data[0] % 2 == 0)
    if function == WRITE_SINGLE_REGISTER:
        return n == 4
    if function == WRITE_MULTIPLE_REGISTERS:
        if n == 4:
            return True
        return n >= 5 and data[4] == n - 5 and data[4] == 2 * struct.unpack(">H", data[2:4])[0]
    return True


def encode_adu(adu: ModbusAdu) -> bytes:
    if adu.protocol_id != 0:
        raise ModbusFramingError("protocol id must be 0")
    base = adu.function & 0x7F
    if base not in SUPPORTED_FUNCTIONS:
        raise ModbusError(f"unsupported function code 0x{adu.function:02X}")
    if not _valid_data(adu.function, adu.data):
        raise ModbusFramingError("PDU data inconsistent with function code")
    if 1 + len(adu.data) > MAX_PDU:
        raise ModbusFramingError("PDU too long")
    pdu = bytes([adu.function]) + adu.data
    return struct.pack(">HHHB", adu.transaction_id, 0, 1 + len(pdu), adu.unit_id) + pdu


def read_adu(buf: bytes) -> tuple[ModbusAdu, int]:
    if len(buf) < MBAP_LEN:
        raise ModbusNeedMoreBytes(MBAP_LEN - len(buf))
    tid, pid, length, uid = struct.unpack_from(">HHHB", buf)
    total = 6 + length
    if length < 2 or length > 1 + MAX_PDU:
        err = ModbusFramingError(f"MBAP length {length} out of range")
        err.consumed = total if length >= 1 else 6
        raise err
    if len(buf) < total:
        raise ModbusNeedMoreBytes(total - len(buf))
    function = buf[7]
    data = bytes(buf[8:total])
    if pid != 0:
        err = ModbusFramingError(f"protocol id {pid} != 0")
        err.consumed = total
        raise err
    adu = ModbusAdu(tid, uid, function, data)
    if function & 0x7F not in SUPPORTED_FUNCTIONS:
        raise UnsupportedFunction(adu, total)
    if not _valid_data(function, data):
        err = ModbusFramingError(f"length mismatch for function 0x{function:02X}")
        err.consumed = total
        raise err
    return adu, total


def decode_adu(data: bytes) -> ModbusAdu:
    adu, used = read_adu(data)
    if used != len(data):
        err = ModbusFramingError(f"length mismatch: MBAP says {used} bytes, buffer has {len(data)}")
        err.consumed = used
        raise err
    return adu


def split_stream(buf: bytes) -> tuple[list, bytes]:
    """Decode every complete ADU in ``buf`` (errors included in order)."""
    out = []
    pos = 0
    while pos < len(buf):
        try:
            adu, used = read_adu(buf[pos:])
        except ModbusNeedMoreBytes:
            break
        except ModbusError as err:
            out.append(err)
            pos += err.consumed or len(buf)
            continue
        out.append(adu)
        pos += used
    return out, bytes(buf[pos:])
