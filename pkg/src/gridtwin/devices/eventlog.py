"""Device event log: ``<t_s> <device> <SEV> <event> k=v ...`` per line."""
from __future__ import annotations

from dataclasses import dataclass, field

SEVERITIES = ("DEBUG", "INFO", "WARN", "ALARM", "CRIT")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.4f}"
    text = str(value)
    return text.replace(" ", "_") if text else "-"


@dataclass(frozen=True)
class Event:
    t_us: int
    device: str
    severity: str
    event: str
    fields: tuple[tuple[str, object], ...] = ()

    def get(self, key, default=None):
        for k, v in self.fields:
            if k == key:
                return v
        return default

    def line(self) -> str:
        parts = [f"{self.t_us / 1e6:.3f}", self.device, self.severity, self.event]
        parts += [f"{k}={_fmt(v)}" for k, v in self.fields]
        return " ".join(parts)


@dataclass
class EventLog:
    events: list[Event] = field(default_factory=list)

    def log(self, t_us: int, device: str, severity: str, event: str, **fields) -> Event:
        if severity not in SEVERITIES:
            raise ValueError(f"unknown severity {severity}")
        if not device or not event or len((device + " " + event).split()) != 2:
            raise ValueError("device and event names must be single words")
        ev = Event(t_us, device, severity, event, tuple(fields.items()))
        self.events.append(ev)
        return ev

    def find(self, event: str, device: str | None = None) -> list[Event]:
        return [e for e in self.events if e.event == event and (device is None or e.device == device)]

    def text(self) -> str:
        # stable sort keeps emission order within one instant
        return "".join(e.line() + "\n" for e in sorted(self.events, key=lambda e: e.t_us))


def parse_line(line: str) -> tuple[float, str, str, str, dict[str, str]]:
    t, device, sev, event, *kv = line.split()
    return float(t), device, sev, event, dict(item.split("=", 1) for item in kv)
