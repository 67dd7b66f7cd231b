"""Holding-register map and Modbus server semantics."""
from __future__ import annotations

import struct
from dataclasses import dataclass

from .codec import (EXC_ILLEGAL_ADDRESS, EXC_ILLEGAL_FUNCTION, EXC_ILLEGAL_VALUE, READ_HOLDING_REGISTERS,
                    WRITE_MULTIPLE_REGISTERS, WRITE_SINGLE_REGISTER, ModbusAdu, exception_response, read_response,
                    write_multiple_response)


@dataclass(frozen=True)
class RegisterMap:
    registers: tuple[tuple[int, int], ...] = ()
    writable: frozenset[int] = frozenset()

    @classmethod
    def from_dict(cls, regs: dict[int, int], writable=()) -> "RegisterMap":
        for addr, val in regs.items():
            if not (0 <= addr <= 0xFFFF and 0 <= val <= 0xFFFF):
                raise ValueError(f"register {addr}={val} out of range")
        return cls(tuple(sorted(regs.items())), frozenset(writable))

    def as_dict(self) -> dict[int, int]:
        return dict(self.registers)

    def __getitem__(self, addr: int) -> int:
        return self.as_dict()[addr]

    def with_values(self, updates: dict[int, int]) -> "RegisterMap":
        regs = self.as_dict()
        regs.update(updates)
        return RegisterMap(tuple(sorted(regs.items())), self.writable)


def server_handle(regmap: RegisterMap, request: ModbusAdu) -> tuple[RegisterMap, ModbusAdu]:
    """Apply one request; return the (possibly updated) map and the response."""
    tid, uid, fc = request.transaction_id, request.unit_id, request.function
    regs = regmap.as_dict()

    def fail(code):
        return regmap, exception_response(tid, uid, fc, code)

    if fc == READ_HOLDING_REGISTERS:
        if len(request.data) != 4:
            return fail(EXC_ILLEGAL_VALUE)
        addr, qty = struct.unpack(">HH", request.data)
        if not 1 <= qty <= 125:
            return fail(EXC_ILLEGAL_VALUE)
        span = range(addr, addr + qty)
        if any(a not in regs for a in span):
            return fail(EXC_ILLEGAL_ADDRESS)
        return regmap, read_response(tid, uid, [regs[a] for a in span])

    if fc == WRITE_SINGLE_REGISTER:
        if len(request.data) != 4:
            return fail(EXC_ILLEGAL_VALUE)
        addr, value = struct.unpack(">HH", request.data)
        if addr not in regs or addr not in regmap.writable:
            return fail(EXC_ILLEGAL_ADDRESS)
        return regmap.with_values({addr: value}), ModbusAdu(tid, uid, fc, request.data)

    if fc == WRITE_MULTIPLE_REGISTERS:
        if len(request.data) < 5:
            return fail(EXC_ILLEGAL_VALUE)
        addr, qty, nbytes = struct.unpack(">HHB", request.data[:5])
        if not 1 <= qty <= 123 or nbytes != 2 * qty or len(request.data) != 5 + nbytes:
            return fail(EXC_ILLEGAL_VALUE)
        span = range(addr, addr + qty)
        if any(a not in regs or a not in regmap.writable for a in span):
            return fail(EXC_ILLEGAL_ADDRESS)
        values = struct.unpack_from(f">{qty}H", request.data, 5)
        return regmap.with_values(dict(zip(span, values))), write_multiple_response(tid, uid, addr, qty)

    return fail(EXC_ILLEGAL_FUNCTION)
