"""HMI/MTU: IEC 104 controlling station running the self-consumption EMS."""
from __future__ import annotations

import math
from dataclasses import dataclass

from ..iec104 import (C_IC_NA_1, C_SE_NC_1, COT_ACT_CON, COT_ACT_TERM, COT_ACTIVATION, COT_INTERROGATED,
                      COT_SPONTANEOUS, IEC104_PORT, M_ME_NC_1, QOI_STATION, Asdu, Close, ConnParams, Deliver, Emit,
                      InfoObject, Iec104Error, Log, Rx, Send, Start, Tick, conn_step, encode_apdu, new_connection,
                      split_stream)
from ..netemu import ConnectBlocked, HostStack
from ..powerflow import Battery
from .datamap import COMMON_ADDRESS, IOA_BSS_SETPOINT
from .ems import EmsParams, ems_compute_setpoint
from .eventlog import EventLog
from .services import blob_tag

US = 1_000_000


class HookError(ValueError):
    pass


@dataclass(frozen=True)
class CommandHook:
    """Transform applied to every setpoint just before it is encoded."""

    kind: str = "identity"  # identity | scale | replace | offset
    arg: float = 0.0

    @classmethod
    def parse(cls, spec: str) -> "CommandHook":
        name, _, arg = spec.strip().partition(":")
        if name == "identity" and not arg:
            return cls()
        if name in ("scale", "replace", "offset"):
            try:
                value = float(arg)
            except ValueError:
                raise HookError(f"bad hook argument in {spec!r}") from None
            if not math.isfinite(value):
                raise HookError(f"bad hook argument in {spec!r}")
            return cls(name, value)
        raise HookError(f"unknown hook {spec!r}")

    def __str__(self) -> str:
        return "identity" if self.kind == "identity" else f"{self.kind}:{self.arg:g}"

    def apply(self, value: float) -> float:
        if self.kind == "scale":
            return value * self.arg
        if self.kind == "replace":
            return self.arg
        if self.kind == "offset":
            return value + self.arg
        return value


@dataclass(frozen=True)
class MtuConfig:
    rtu: str = "vrtu"
    gi_period_s: float = 5.0
    stale_s: float = 20.0
    reconnect_s: float = 10.0
    maintenance_s: float = 60.0
    maintenance_timeout_s: float = 5.0
    fileserver: str | None = "fileserver"
    update_name: str = "update"
    ems: EmsParams = EmsParams()
    bss_e_cap_kwh: float = 10.0
    bss_eta: float = 0.95
    conn: ConnParams = ConnParams()


@dataclass
class _Maintenance:
    stream: object
    deadline: int
    buf: bytes = b""
    asked: bool = False


@dataclass
class Measurement:
    value: float
    t_us: int


class Mtu:
    def __init__(self, name: str, host: HostStack, ioa_roles: dict[int, str], log: EventLog,
                 config: MtuConfig = MtuConfig(), ca: int = COMMON_ADDRESS, setpoint_ioa: int = IOA_BSS_SETPOINT):
        self.name = name
        self.host = host
        self.log = log
        self.cfg = config
        self.ca = ca
        self.setpoint_ioa = setpoint_ioa
        self.roles = dict(ioa_roles)
        self.hook = CommandHook()
        self.values: dict[int, Measurement] = {}
        self.last_fresh_us = 0
        self.stale = False
        self.stream = None
        self.conn = None
        self.buf = b""
        self._start_sent = False
        self._was_started = False
        self._connect_deadline = 0
        self.next_connect = 0
        self.next_gi = 0
        self.next_maintenance = int(config.maintenance_s * US) if config.fileserver else None
        self._maint: _Maintenance | None = None
        self.last_sent: float | None = None
        self.last_ems: float | None = None
        self.commands: list[tuple[int, float, float]] = []  # (t, ems, sent)

    # -- helpers -----------------------------------------------------------------

    def measurement_age_s(self, now: int) -> float:
        return (now - self.last_fresh_us) / US

    def _role_values(self, prefix: str) -> list[float] | None:
        vals = [m.value for ioa, m in self.values.items() if self.roles.get(ioa, "").startswith(prefix)]
        wanted = sum(1 for r in self.roles.values() if r.startswith(prefix))
        return vals if len(vals) == wanted else None

    # -- main loop -----------------------------------------------------------------

    def step(self, now: int) -> None:
        self._link(now)
        if self.conn is not None and self.stream is not None and self.stream.state == "open":
            data = self.stream.recv()
            if data:
                frames, self.buf = split_stream(self.buf + data)
                for item in frames:
                    if isinstance(item, Iec104Error):
                        self.log.log(now, self.name, "WARN", "iec104_bad_frame", error=type(item).__name__)
                        continue
                    self._conn_event(Rx(item, now), now)
                    if self.conn is None:
                        break
            self._conn_event(Tick(now), now)
            if self.conn is not None and self.conn.started:
                if not self._was_started:
                    self._was_started = True
                    self.log.log(now, self.name, "INFO", "link_started", rtu=self.cfg.rtu)
                    self.next_gi = now
                if now >= self.next_gi:
                    self.next_gi = now + int(self.cfg.gi_period_s * US)
                    self._send(Asdu(C_IC_NA_1, COT_ACTIVATION, self.ca, (InfoObject(0, QOI_STATION),)), now)
        self._check_stale(now)
        if self.next_maintenance is not None:
            self._maintenance(now)

    def _link(self, now: int) -> None:
        stream = self.stream
        if stream is None:
            if now >= self.next_connect:
                self._connect(now)
            return
        if stream.state == "connecting" and now >= self._connect_deadline:
            self.log.log(now, self.name, "WARN", "connect_timeout", rtu=self.cfg.rtu)
            stream.close(now)
            self._drop_link(now, now)
        elif stream.state == "closed":
            self.log.log(now, self.name, "WARN", "link_lost", rtu=self.cfg.rtu, reset=stream.reset)
            self._drop_link(now, now + int(self.cfg.reconnect_s * US))
        elif stream.state == "open" and not self._start_sent:
            self._start_sent = True
            self._conn_event(Start(now), now)

    def _connect(self, now: int) -> None:
        reconnect = int(self.cfg.reconnect_s * US)
        try:
            self.stream = self.host.connect(self.cfg.rtu, IEC104_PORT, now)
        except ConnectBlocked:
            self.log.log(now, self.name, "WARN", "connect_blocked", rtu=self.cfg.rtu)
            self.next_connect = now + reconnect
            return
        self.log.log(now, self.name, "INFO", "connecting", rtu=self.cfg.rtu)
        self.conn = new_connection("controlling", now, self.cfg.conn)
        self.buf = b""
        self._start_sent = self._was_started = False
        self._connect_deadline = now + reconnect

    def _drop_link(self, now: int, next_connect: int) -> None:
        self.stream = self.conn = None
        self.next_connect = next_connect

    def _conn_event(self, event, now: int) -> None:
        if self.conn is None:
            return
        self.conn, actions = conn_step(self.conn, event)
        for act in actions:
            if isinstance(act, Emit):
                self.stream.send(encode_apdu(act.apdu), now)
            elif isinstance(act, Deliver):
                self._on_asdu(act.asdu, now)
            elif isinstance(act, Log):
                self.log.log(now, self.name, act.severity, act.event, **dict(act.fields))
            elif isinstance(act, Close):
                self.log.log(now, self.name, "WARN", "link_closed", rtu=self.cfg.rtu)
                self.stream.close(now)
                self._drop_link(now, now + int(self.cfg.reconnect_s * US))
                return

    def _send(self, asdu: Asdu, now: int) -> None:
        self._conn_event(Send(asdu, now), now)

    def _on_asdu(self, asdu: Asdu, now: int) -> None:
        if asdu.type_id == M_ME_NC_1 and asdu.cot in (COT_SPONTANEOUS, COT_INTERROGATED):
            fresh = [o for o in asdu.objects if o.quality == 0 and o.ioa in self.roles]
            for obj in fresh:
                self.values[obj.ioa] = Measurement(float(obj.value), now)
            if fresh:
                self.last_fresh_us = now
                if self.stale:
                    self.stale = False
                    self.log.log(now, self.name, "INFO", "stale_cleared")
                self.log.log(now, self.name, "INFO", "hmi_update", cot=asdu.cot,
                             **{str(o.ioa): float(o.value) for o in fresh})
            if asdu.cot == COT_SPONTANEOUS:
                self._run_ems(now, force=False)
        elif asdu.type_id == C_IC_NA_1 and asdu.cot == COT_ACT_TERM:
            self._run_ems(now, force=True)
        elif asdu.type_id == C_SE_NC_1 and asdu.cot in (COT_ACT_CON, COT_ACT_TERM):
            obj = asdu.objects[0]
            event = "cmd_confirmed" if asdu.cot == COT_ACT_CON else "cmd_terminated"
            self.log.log(now, self.name, "WARN" if asdu.negative else "INFO", event, ioa=obj.ioa,
                         value=float(obj.value), negative=asdu.negative)

    def _run_ems(self, now: int, force: bool) -> None:
        if self.stale:
            return
        loads, pvs = self._role_values("load"), self._role_values("pv")
        soc = self._role_values("bss_soc")
        if loads is None or pvs is None or soc is None:
            return
        batt = Battery(min(1.0, max(0.0, soc[0])), self.cfg.bss_e_cap_kwh, self.cfg.ems.p_max_kw, self.cfg.bss_eta)
        ems = ems_compute_setpoint(sum(loads), -sum(pvs), batt, self.cfg.ems)
        if not force and self.last_ems is not None and abs(ems - self.last_ems) < self.cfg.ems.deadband_kw:
            return
        sent = self.hook.apply(ems)
        self.last_ems, self.last_sent = ems, sent
        self.commands.append((now, ems, sent))
        self._send(Asdu(C_SE_NC_1, COT_ACTIVATION, self.ca, (InfoObject(self.setpoint_ioa, sent, 0),)), now)
        self.log.log(now, self.name, "INFO", "cmd_sent", ioa=self.setpoint_ioa, ems=ems, sent=sent,
                     hook=str(self.hook))

    def _check_stale(self, now: int) -> None:
        if not self.stale and now - self.last_fresh_us > int(self.cfg.stale_s * US):
            self.stale = True
            self.log.log(now, self.name, "ALARM", "measurement_stale", age_s=self.measurement_age_s(now),
                         held_setpoint=self.last_sent if self.last_sent is not None else 0.0)

    # -- software maintenance ----------------------------------------------------------

    def _maintenance(self, now: int) -> None:
        m = self._maint
        if m is None:
            if now >= self.next_maintenance:
                self.next_maintenance += int(self.cfg.maintenance_s * US)
                try:
                    stream = self.host.connect(self.cfg.fileserver, 21, now)
                except ConnectBlocked:
                    self.log.log(now, self.name, "WARN", "update_unreachable", server=self.cfg.fileserver)
                    return
                self._maint = _Maintenance(stream, now + int(self.cfg.maintenance_timeout_s * US))
            return
        if m.stream.state == "closed" or now >= m.deadline:
            self.log.log(now, self.name, "WARN", "update_failed", server=self.cfg.fileserver)
            m.stream.close(now)
            self._maint = None
            return
        m.buf += m.stream.recv()
        lines = m.buf.split(b"\n")
        if not m.asked and len(lines) > 1:
            m.asked = True
            m.buf = b"\n".join(lines[1:])
            m.stream.send(f"GET {self.cfg.update_name}\n".encode(), now)
            return
        if m.asked and len(lines) > 1:
            self._apply_update(lines[0].decode("utf-8", "replace").strip(), now)
            m.stream.close(now)
            self._maint = None

    def _apply_update(self, reply: str, now: int) -> None:
        parts = reply.split()
        if not parts or parts[0] != "DATA" or len(parts) != 3:
            self.log.log(now, self.name, "INFO", "update_none")
            return
        try:
            content = bytes.fromhex(parts[2])
        except ValueError:
            content = b""
        if blob_tag(content) != parts[1]:
            self.log.log(now, self.name, "WARN", "update_rejected", reason="integrity")
            return
        text = content.decode("utf-8", "replace").strip()
        if not text.startswith("hook="):
            self.log.log(now, self.name, "WARN", "update_rejected", reason="format")
            return
        try:
            hook = CommandHook.parse(text[5:])
        except HookError:
            self.log.log(now, self.name, "WARN", "update_rejected", reason="hook")
            return
        if hook != self.hook:
            self.hook = hook
            self.log.log(now, self.name, "INFO", "update_installed", hook=str(hook), tag=parts[1][:16])
        else:
            self.log.log(now, self.name, "DEBUG", "update_current", hook=str(hook))
