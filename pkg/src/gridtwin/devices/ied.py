"""Field IED: a Modbus TCP server over a register map bound to one asset."""
from __future__ import annotations

from ..modbus import (MODBUS_PORT, ModbusError, RegisterMap, encode_adu, float_to_regs, regs_to_float,
                      server_handle, split_stream, write_request_fields)
from ..netemu import HostStack
from .datamap import REG_P, REG_SETPOINT, REG_SOC, REG_V, UNIT_ID, IedSpec
from .eventlog import EventLog


def initial_registers(spec: IedSpec) -> RegisterMap:
    regs = {r: 0 for r in range(REG_P, REG_V + 2)}
    writable = set()
    if any(r == REG_SOC for r, _, _ in spec.monitors):
        regs.update({REG_SOC: 0, REG_SOC + 1: 0})
    if spec.setpoint is not None:
        regs.update({REG_SETPOINT: 0, REG_SETPOINT + 1: 0})
        writable = {REG_SETPOINT, REG_SETPOINT + 1}
    return RegisterMap.from_dict(regs, writable)


class Ied:
    def __init__(self, spec: IedSpec, host: HostStack, log: EventLog, unit_id: int = UNIT_ID):
        self.spec = spec
        self.name = spec.name
        self.host = host
        self.log = log
        self.unit_id = unit_id
        self.regmap = initial_registers(spec)
        self.setpoint_kw: float | None = None  # latched, applied at the next grid step
        self._sessions: list[list] = []  # [stream, buffer]
        host.listen(MODBUS_PORT)

    def refresh(self, values: dict[int, float]) -> None:
        """Write float measurements (register -> value) from grid truth."""
        updates = {}
        for reg, value in values.items():
            hi, lo = float_to_regs(value)
            updates[reg], updates[reg + 1] = hi, lo
        self.regmap = self.regmap.with_values(updates)

    def register_float(self, reg: int) -> float:
        return regs_to_float([self.regmap[reg], self.regmap[reg + 1]])

    def take_setpoint(self) -> float | None:
        return self.setpoint_kw

    def step(self, now: int) -> None:
        for stream in self.host.accept(MODBUS_PORT):
            self._sessions.append([stream, b""])
        if not self._sessions:
            return
        alive = []
        for session in self._sessions:
            stream, buf = session
            data = stream.recv()
            if data:
                session[1] = self._serve(stream, buf + data, now)
            if stream.state != "closed":
                alive.append(session)
        self._sessions = alive

    def _serve(self, stream, buf: bytes, now: int) -> bytes:
        frames, rest = split_stream(buf)
        for item in frames:
            if isinstance(item, ModbusError):
                self.log.log(now, self.name, "WARN", "modbus_bad_frame", peer=stream.peer, error=type(item).__name__)
                continue
            if item.unit_id != self.unit_id:
                continue
            before = self.regmap
            self.regmap, rsp = server_handle(self.regmap, item)
            stream.send(encode_adu(rsp), now)
            if rsp.is_exception:
                self.log.log(now, self.name, "WARN", "modbus_exception", peer=stream.peer,
                             function=item.function, code=rsp.exception_code)
            elif self.regmap is not before and self.spec.setpoint is not None:
                addr, regs = write_request_fields(item)
                self.setpoint_kw = self.register_float(REG_SETPOINT)
                self.log.log(now, self.name, "INFO", "modbus_write", peer=stream.peer, addr=addr,
                             count=len(regs), value=self.setpoint_kw)
        return rest
