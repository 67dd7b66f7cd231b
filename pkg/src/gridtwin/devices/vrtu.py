"""Virtual RTU: IEC 104 controlled station in front of Modbus IEDs."""
from __future__ import annotations

from dataclasses import dataclass

from ..iec104 import (C_IC_NA_1, C_SE_NC_1, COT_ACTIVATION, COT_ACT_CON, COT_ACT_TERM,
                      COT_INTERROGATED, COT_SPONTANEOUS, COT_UNKNOWN_IOA, IEC104_PORT, M_ME_NC_1, Asdu, Close,
                      ConnParams, Deliver, Emit, InfoObject, Iec104Error, Log, Rx, Send, Tick, conn_step,
                      encode_apdu, new_connection, split_stream)
from ..modbus import (MODBUS_PORT, ModbusError, encode_adu, float_to_regs, read_request, regs_to_float,
                      response_registers, write_multiple)
from ..modbus import split_stream as modbus_split
from ..netemu import ConnectBlocked, Frame, HostStack
from .datamap import COMMON_ADDRESS, UNIT_ID, IedSpec
from .eventlog import EventLog
from .services import DEFAULT_CREDENTIAL, DEFAULT_SERVICES, LineSession, ServiceHost, ServiceSpec, service_auth
from .store import DatapointStore

US = 1_000_000
QUALITY_INVALID = 0x80
MAX_OBJECTS = 30  # non-SQ short floats per ASDU within 249 bytes


@dataclass(frozen=True)
class VrtuConfig:
    budget: int = 20  # frames per substep
    crash_factor: float = 10.0  # flood rate (x budget) that saturates the device
    crash_after_s: float = 10.0  # sustained saturation before a crash
    poll_period_s: float = 1.0
    poll_offset_s: float = 0.1
    modbus_timeout_s: float = 3.0
    deadband_p_kw: float = 0.1
    deadband_v: float = 1.0
    deadband_soc: float = 0.005
    credentials: tuple[tuple[str, str], ...] = ()
    default_credentials: bool = True
    remote_exec: bool = True
    services: tuple[ServiceSpec, ...] = DEFAULT_SERVICES
    conn: ConnParams = ConnParams()

    def credential_list(self) -> list[tuple[str, str]]:
        creds = list(self.credentials)
        if self.default_credentials and DEFAULT_CREDENTIAL not in creds:
            creds.append(DEFAULT_CREDENTIAL)
        return creds


def budget_keep(legit: int, flood: int, budget: int) -> int:
    """Legitimate frames processed when ``legit + flood`` arrive in one substep."""
    total = legit + flood
    if total <= budget:
        return legit
    return budget * legit // total


class _ModbusClient:
    def __init__(self, spec: IedSpec):
        self.spec = spec
        self.stream = None
        self.buf = b""
        self.tid = 0
        self.pending: dict[int, tuple] = {}  # tid -> (kind, t_sent, context)

    def next_tid(self) -> int:
        self.tid = (self.tid + 1) & 0xFFFF
        return self.tid


class Vrtu:
    def __init__(self, name: str, host: HostStack, ieds: list[IedSpec], log: EventLog,
                 config: VrtuConfig = VrtuConfig(), ca: int = COMMON_ADDRESS):
        self.name = name
        self.host = host
        self.log = log
        self.cfg = config
        self.ca = ca
        self.alive = True
        self.saturated = False
        self._sat_since: int | None = None
        self.store = DatapointStore()
        self.monitor_map: dict[int, tuple[str, int, str]] = {}  # ioa -> (ied, register, point)
        self.control_map: dict[int, tuple[str, int]] = {}  # ioa -> (ied, register)
        self.clients = {spec.name: _ModbusClient(spec) for spec in ieds}
        for spec in ieds:
            for reg, point, ioa in spec.monitors:
                self.store.define((ca, ioa), "monitor", point, quality=QUALITY_INVALID)
                self.monitor_map[ioa] = (spec.name, reg, point)
            if spec.setpoint is not None:
                reg, binding, ioa = spec.setpoint
                self.store.define((ca, ioa), "control", binding)
                self.control_map[ioa] = (spec.name, reg)
        self.last_reported: dict[int, float] = {}
        self.master = None
        self.conn = None
        self.buf = b""
        self.next_poll = int(config.poll_offset_s * US)
        self.counters = {"legit_dropped": 0, "flood_seen": 0, "legit_kept": 0, "emitted_apdus": 0}
        self._drop_window = [0, 0]  # legit dropped, flood seen since last log line
        self._next_drop_log = 0
        self._next_session = 1
        host.listen(IEC104_PORT)
        self.services = ServiceHost(name, host, config.services, log, self._service_command)

    # -- overload model --------------------------------------------------------

    def intake(self, frames: list[Frame], now: int) -> list[Frame]:
        """Drop what exceeds the processing budget before any protocol handling."""
        if not self.alive:
            return []
        legit = [f for f in frames if f.kind != "flood"]
        flood = sum(f.count for f in frames if f.kind == "flood")
        self.counters["flood_seen"] += flood
        if flood >= self.cfg.crash_factor * self.cfg.budget:
            if self._sat_since is None:
                self._sat_since = now
                self.log.log(now, self.name, "WARN", "overload_saturated", flood=flood, budget=self.cfg.budget)
            self.saturated = True
            keep = 0
        else:
            if self._sat_since is not None:
                self.log.log(now, self.name, "INFO", "overload_cleared")
            self._sat_since = None
            self.saturated = False
            keep = budget_keep(len(legit), flood, self.cfg.budget)
        dropped = len(legit) - keep
        self.counters["legit_dropped"] += dropped
        self.counters["legit_kept"] += keep
        self._drop_window[0] += dropped
        self._drop_window[1] += flood
        if now >= self._next_drop_log:
            if self._drop_window[0] or self._drop_window[1]:
                self.log.log(now, self.name, "WARN", "budget_overflow", legit_dropped=self._drop_window[0],
                             flood=self._drop_window[1])
                self._drop_window = [0, 0]
            self._next_drop_log = now - now % US + US
        if self._sat_since is not None and now - self._sat_since >= int(self.cfg.crash_after_s * US):
            self.crash(now, "overload")
        return legit[:keep]

    def crash(self, now: int, reason: str) -> None:
        if not self.alive:
            return
        self.alive = False
        self.host.enabled = False
        self.log.log(now, self.name, "CRIT", "crashed", reason=reason)

    # -- main loop -------------------------------------------------------------

    def step(self, now: int) -> None:
        if not self.alive or self.saturated:
            return
        self._accept_master(now)
        if self.master is not None:
            self._serve_master(now)
        self._modbus(now)
        self.services.step(now)

    def _accept_master(self, now: int) -> None:
        for stream in self.host.accept(IEC104_PORT):
            if self.master is not None and self.master.state != "closed":
                self.master.close(now)
                self.log.log(now, self.name, "WARN", "master_replaced", old=self.master.peer)
            self.master = stream
            self.conn = new_connection("controlled", now, self.cfg.conn)
            self.buf = b""
            self.log.log(now, self.name, "INFO", "master_connected", peer=stream.peer)

    def _serve_master(self, now: int) -> None:
        stream = self.master
        if stream.state == "closed":
            self.log.log(now, self.name, "WARN", "master_lost", peer=stream.peer)
            self.master = self.conn = None
            return
        data = stream.recv()
        if data:
            frames, self.buf = split_stream(self.buf + data)
            for item in frames:
                if isinstance(item, Iec104Error):
                    self.log.log(now, self.name, "WARN", "iec104_bad_frame", error=type(item).__name__)
                    continue
                self._conn_event(Rx(item, now), now)
                if self.conn is None:
                    return
        self._conn_event(Tick(now), now)

    def _conn_event(self, event, now: int) -> None:
        if self.conn is None:
            return
        self.conn, actions = conn_step(self.conn, event)
        for act in actions:
            if isinstance(act, Emit):
                self.master.send(encode_apdu(act.apdu), now)
                if act.apdu.format == "I":
                    self.counters["emitted_apdus"] += 1
            elif isinstance(act, Deliver):
                self._on_asdu(act.asdu, now)
            elif isinstance(act, Log):
                self.log.log(now, self.name, act.severity, act.event, **dict(act.fields))
            elif isinstance(act, Close):
                self.master.close(now)
                self.master = self.conn = None
                return

    def _send(self, asdu: Asdu, now: int) -> None:
        self._conn_event(Send(asdu, now), now)

    def _on_asdu(self, asdu: Asdu, now: int) -> None:
        if asdu.type_id == C_IC_NA_1 and asdu.cot == COT_ACTIVATION:
            self.log.log(now, self.name, "INFO", "gi_rx")
            self._send(Asdu(C_IC_NA_1, COT_ACT_CON, self.ca, asdu.objects), now)
            objects = []
            for ioa in sorted(self.monitor_map):
                dp = self.store[(self.ca, ioa)]
                objects.append(InfoObject(ioa, dp.value, dp.quality))
                if not dp.quality:
                    self.last_reported[ioa] = dp.value
            for k in range(0, len(objects), MAX_OBJECTS):
                self._send(Asdu(M_ME_NC_1, COT_INTERROGATED, self.ca, tuple(objects[k:k + MAX_OBJECTS])), now)
            self._send(Asdu(C_IC_NA_1, COT_ACT_TERM, self.ca, asdu.objects), now)
        elif asdu.type_id == C_SE_NC_1 and asdu.cot == COT_ACTIVATION:
            obj = asdu.objects[0]
            if obj.ioa not in self.control_map:
                self.log.log(now, self.name, "WARN", "cmd_unknown_ioa", ioa=obj.ioa)
                self._send(Asdu(C_SE_NC_1, COT_UNKNOWN_IOA, self.ca, asdu.objects, negative=True), now)
                return
            self.log.log(now, self.name, "INFO", "cmd_rx", ioa=obj.ioa, value=float(obj.value))
            self._send(Asdu(C_SE_NC_1, COT_ACT_CON, self.ca, asdu.objects), now)
            self._write_setpoint(obj.ioa, float(obj.value), now, asdu)
        else:
            self.log.log(now, self.name, "WARN", "asdu_unsupported", type_id=asdu.type_id, cot=asdu.cot)

    # -- Modbus side -------------------------------------------------------------

    def _write_setpoint(self, ioa: int, value: float, now: int, asdu: Asdu | None) -> bool:
        self.store.update((self.ca, ioa), value, now)
        ied, reg = self.control_map[ioa]
        client = self.clients[ied]
        if client.stream is None or client.stream.state != "open":
            self.log.log(now, self.name, "WARN", "modbus_write_failed", ied=ied, reason="no_session")
            return False
        tid = client.next_tid()
        client.stream.send(encode_adu(write_multiple(tid, UNIT_ID, reg, float_to_regs(value))), now)
        client.pending[tid] = ("write", now, (ioa, value, asdu))
        self.log.log(now, self.name, "INFO", "modbus_write_tx", ied=ied, addr=reg, value=value, tid=tid)
        return True

    def _modbus(self, now: int) -> None:
        poll = now >= self.next_poll
        if poll:
            self.next_poll += int(self.cfg.poll_period_s * US)
        changed: list[int] = []
        timeout = int(self.cfg.modbus_timeout_s * US)
        for client in self.clients.values():
            stream = client.stream
            if stream is not None and stream.state == "closed":
                client.stream = stream = None
            if stream is None:
                if poll:
                    self._connect(client, now)
                continue
            data = stream.recv()
            if data:
                changed += self._on_modbus(client, client.buf + data, now)
            stale = [tid for tid, (_, t, _) in client.pending.items() if now - t > timeout]
            if stale:
                self.log.log(now, self.name, "WARN", "modbus_timeout", ied=client.spec.name, pending=len(stale))
                stream.abort(now)
                client.stream, client.pending, client.buf = None, {}, b""
                continue
            if poll and stream.state == "open" and not any(k == "read" for k, _, _ in client.pending.values()):
                start, count = client.spec.read_span
                tid = client.next_tid()
                stream.send(encode_adu(read_request(tid, UNIT_ID, start, count)), now)
                client.pending[tid] = ("read", now, (start, count))
        if changed and self.conn is not None and self.conn.started:
            objects = []
            for ioa in sorted(set(changed)):
                dp = self.store[(self.ca, ioa)]
                objects.append(InfoObject(ioa, dp.value, dp.quality))
                self.last_reported[ioa] = dp.value
            for k in range(0, len(objects), MAX_OBJECTS):
                self._send(Asdu(M_ME_NC_1, COT_SPONTANEOUS, self.ca, tuple(objects[k:k + MAX_OBJECTS])), now)

    def _connect(self, client: _ModbusClient, now: int) -> None:
        try:
            client.stream = self.host.connect(client.spec.name, MODBUS_PORT, now)
        except ConnectBlocked:
            self.log.log(now, self.name, "WARN", "modbus_connect_blocked", ied=client.spec.name)
        client.buf, client.pending = b"", {}

    def _deadband(self, point: str) -> float:
        if point.endswith("_v"):
            return self.cfg.deadband_v
        if point.endswith("soc"):
            return self.cfg.deadband_soc
        return self.cfg.deadband_p_kw

    def _on_modbus(self, client: _ModbusClient, buf: bytes, now: int) -> list[int]:
        frames, client.buf = modbus_split(buf)
        changed = []
        for adu in frames:
            if isinstance(adu, ModbusError):
                self.log.log(now, self.name, "WARN", "modbus_bad_frame", ied=client.spec.name)
                continue
            entry = client.pending.pop(adu.transaction_id, None)
            if entry is None:
                continue
            kind, _, ctx = entry
            if adu.is_exception:
                self.log.log(now, self.name, "WARN", "modbus_exception", ied=client.spec.name,
                             code=adu.exception_code)
                continue
            if kind == "read":
                start, _ = ctx
                regs = response_registers(adu)
                for reg, point, ioa in client.spec.monitors:
                    value = regs_to_float(regs[reg - start:reg - start + 2])
                    self.store.update((self.ca, ioa), value, now)
                    last = self.last_reported.get(ioa)
                    if last is None or abs(value - last) >= self._deadband(point):
                        changed.append(ioa)
            else:
                ioa, value, asdu = ctx
                self.log.log(now, self.name, "INFO", "cmd_done", ioa=ioa, value=value)
                if asdu is not None and self.conn is not None:
                    self._send(Asdu(C_SE_NC_1, COT_ACT_TERM, self.ca, asdu.objects), now)
        return changed

    # -- auxiliary services ---------------------------------------------------------

    def _service_command(self, session: LineSession, verb: str, args: list[str], now: int) -> str:
        src = session.stream.peer
        if verb == "LOGIN" and len(args) == 2:
            result = service_auth(self.cfg.credential_list(), args[0], args[1], self._next_session)
            self.log.log(now, self.name, "INFO" if result.granted else "WARN", "auth_attempt",
                         service=session.service.name, src=src, user=args[0], granted=result.granted)
            if result.granted:
                self._next_session += 1
                session.user = args[0]
                return f"OK session={result.session}"
            return "DENIED"
        if verb != "EXEC":
            return "ERR unknown command"
        if session.user is None:
            return "DENIED login required"
        if not self.cfg.remote_exec:
            self.log.log(now, self.name, "WARN", "exec_refused", src=src, cmd=" ".join(args))
            return "ERR not permitted"
        self.log.log(now, self.name, "ALARM", "exec", src=src, user=session.user, cmd=" ".join(args))
        cmd = args[0] if args else ""
        if cmd == "id":
            return f"uid=0({session.user})"
        if cmd == "halt":
            session.reply("OK halting", now)
            self.crash(now, "remote_halt")
            return "OK"
        if cmd == "read" and len(args) == 2 and args[1].isdigit() and (self.ca, int(args[1])) in self.store:
            return f"VALUE {self.store[(self.ca, int(args[1]))].value:.4f}"
        if cmd == "write" and len(args) == 3 and args[1].isdigit() and int(args[1]) in self.control_map:
            try:
                value = float(args[2])
            except ValueError:
                return "ERR bad value"
            return "OK" if self._write_setpoint(int(args[1]), value, now, None) else "ERR no session"
        return "ERR bad exec"
