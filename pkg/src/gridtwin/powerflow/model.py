"""Grid data types and the reference MV/LV grid builder.

All powers are in kW/kvar with a load-positive sign convention: a consuming
load has ``p_kw > 0``, a generating PV unit ``p_kw < 0`` and a charging
battery ``p_kw > 0``.
"""
from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Literal, Sequence

BusKind = Literal["slack", "pq"]
AssetKind = Literal["load", "pv", "bss"]

#: reactive-to-active ratio of a load at cos(phi) = 0.95 inductive
LOAD_Q_RATIO = math.tan(math.acos(0.95))


class GridModelError(ValueError):
    """Invalid grid model (duplicate ids, missing slack, disconnected graph...)."""


@dataclass(frozen=True)
class Bus:
    id: int
    nominal_kv: float
    kind: BusKind = "pq"
    name: str = ""


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    r_ohm_per_km: float
    x_ohm_per_km: float
    length_km: float
    i_max_ka: float = 0.27


@dataclass(frozen=True)
class Transformer:
    id: int
    hv_bus: int
    lv_bus: int
    s_rated_mva: float
    vk_percent: float
    vkr_percent: float
    tap_pos: int = 0
    tap_step_percent: float = 2.5
    tap_min: int = -2
    tap_max: int = 2

    @property
    def ratio(self) -> float:
        """Off-nominal turns ratio on the HV side."""
        return 1.0 + self.tap_pos * self.tap_step_percent / 100.0


@dataclass(frozen=True)
class Profile:
    """Step-hold series of ``(t_s, p_kw)`` breakpoints sorted by time."""

    points: tuple[tuple[float, float], ...]

    @classmethod
    def constant(cls, p_kw: float) -> "Profile":
        return cls(((0.0, float(p_kw)),))


@dataclass(frozen=True)
class Asset:
    id: str
    bus: int
    kind: AssetKind
    p_max_kw: float
    p_kw: float = 0.0
    profile: Profile | None = None

    @property
    def q_ratio(self) -> float:
        return LOAD_Q_RATIO if self.kind == "load" else 0.0


@dataclass(frozen=True)
class Battery:
    soc: float
    e_cap_kwh: float
    p_max_kw: float
    eta: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.soc <= 1.0:
            raise GridModelError(f"battery soc {self.soc} outside [0, 1]")
        if self.e_cap_kwh <= 0:
            raise GridModelError("battery e_cap_kwh must be positive")
        if not 0.0 < self.eta <= 1.0:
            raise GridModelError("battery eta must be in (0, 1]")


@dataclass(frozen=True)
class MeasurementPoint:
    """A sensor location. ``element`` is one of bus/line/trafo/asset."""

    id: str
    quantity: Literal["V", "P", "Q", "I"]
    element: Literal["bus", "line", "trafo", "asset"]
    ref: int | str
    side: Literal["hv", "lv"] = "lv"


@dataclass
class GridModel:
    buses: list[Bus]
    lines: list[Line]
    transformers: list[Transformer]
    assets: list[Asset]
    battery: Battery | None = None
    measurement_points: list[MeasurementPoint] = field(default_factory=list)
    base_mva: float = 1.0
    slack_vm_pu: float = 1.0

    def __post_init__(self):
        self.validate()

    # -- lookups -----------------------------------------------------------
    @property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def slack(self) -> Bus:
        return next(b for b in self.buses if b.kind == "slack")

    def asset(self, asset_id: str) -> Asset:
        for a in self.assets:
            if a.id == asset_id:
                return a
        raise KeyError(asset_id)

    def bss(self) -> Asset | None:
        return next((a for a in self.assets if a.kind == "bss"), None)

    def branches(self):
        """Yield ``(kind, id, from_bus, to_bus)`` for every line and transformer."""
        for t in self.transformers:
            yield "trafo", t.id, t.hv_bus, t.lv_bus
        for ln in self.lines:
            yield "line", ln.id, ln.from_bus, ln.to_bus

    # -- validation --------------------------------------------------------
    def validate(self) -> None:
        problems: list[str] = []
        ids = [b.id for b in self.buses]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            problems.append(f"duplicate bus ids {dupes}")
        slacks = [b.id for b in self.buses if b.kind == "slack"]
        if not slacks:
            problems.append("missing slack bus")
        elif len(slacks) > 1:
            problems.append(f"multiple slack buses {slacks}")
        for b in self.buses:
            if b.nominal_kv <= 0:
                problems.append(f"bus {b.id}: nominal_kv must be > 0")
        known = set(ids)
        for kind, ident, f, t in self.branches():
            for bus in (f, t):
                if bus not in known:
                    problems.append(f"{kind} {ident}: unknown bus {bus}")
            if f == t:
                problems.append(f"{kind} {ident}: from == to")
        for ln in self.lines:
            if ln.r_ohm_per_km < 0 or ln.x_ohm_per_km < 0:
                problems.append(f"line {ln.id}: negative impedance")
            if ln.length_km <= 0:
                problems.append(f"line {ln.id}: length must be > 0")
        for t in self.transformers:
            if not 0 < t.vkr_percent <= t.vk_percent:
                problems.append(f"trafo {t.id}: need 0 < vkr_percent <= vk_percent")
            if not t.tap_min <= t.tap_pos <= t.tap_max:
                problems.append(f"trafo {t.id}: tap {t.tap_pos} outside [{t.tap_min}, {t.tap_max}]")
        line_ids = [ln.id for ln in self.lines]
        if len(set(line_ids)) != len(line_ids):
            problems.append("duplicate line ids")
        asset_ids = [a.id for a in self.assets]
        if len(set(asset_ids)) != len(asset_ids):
            problems.append("duplicate asset ids")
        for a in self.assets:
            if a.bus not in known:
                problems.append(f"asset {a.id}: unknown bus {a.bus}")
            if abs(a.p_kw) > a.p_max_kw + 1e-12:
                problems.append(f"asset {a.id}: |p_kw| exceeds p_max_kw")
            if a.kind == "load" and a.p_kw < 0:
                problems.append(f"asset {a.id}: load p_kw must be >= 0")
            if a.kind == "pv" and a.p_kw > 0:
                problems.append(f"asset {a.id}: pv p_kw must be <= 0 (load convention)")
        if sum(a.kind == "bss" for a in self.assets) > 1:
            problems.append("at most one bss asset is supported")
        if not problems and not self._connected():
            problems.append("grid graph is disconnected")
        if problems:
            raise GridModelError("; ".join(problems))

    def _connected(self) -> bool:
        adj = defaultdict(set)
        for _, _, f, t in self.branches():
            adj[f].add(t)
            adj[t].add(f)
        start = self.buses[0].id
        seen = {start}
        todo = deque([start])
        while todo:
            for nxt in adj[todo.popleft()]:
                if nxt not in seen:
                    seen.add(nxt)
                    todo.append(nxt)
        return len(seen) == len(self.buses)

    def children(self) -> dict[int, list[int]]:
        """Radial tree below the slack: bus id -> list of child bus ids."""
        adj = defaultdict(list)
        for _, _, f, t in self.branches():
            adj[f].append(t)
            adj[t].append(f)
        tree: dict[int, list[int]] = defaultdict(list)
        root = self.slack.id
        seen = {root}
        todo = deque([root])
        while todo:
            node = todo.popleft()
            for nxt in sorted(adj[node]):
                if nxt not in seen:
                    seen.add(nxt)
                    tree[node].append(nxt)
                    todo.append(nxt)
        return dict(tree)


@dataclass(frozen=True)
class GridParams:
    """Representative LV numbers; the lab values were never published."""

    mv_kv: float = 10.0
    lv_kv: float = 0.4
    base_mva: float = 1.0
    slack_vm_pu: float = 1.0
    trafo_s_rated_mva: float = 0.63
    trafo_vk_percent: float = 4.0
    trafo_vkr_percent: float = 1.0
    trafo_tap_pos: int = 0
    trafo_tap_step_percent: float = 2.5
    line_r_ohm_per_km: float = 0.206
    line_x_ohm_per_km: float = 0.080
    line_length_km: float = 0.3
    line_i_max_ka: float = 0.27
    # per feeder: asset kinds from the busbar outwards, one bus per entry
    feeders: tuple[tuple[str, ...], ...] = (("load", "pv", "bss"), ("load", "pv", "load"))
    load_p_kw: tuple[float, ...] = (3.0, 4.0, 2.5)
    load_p_max_kw: float = 5.0
    pv_p_kw: tuple[float, ...] = (-6.0, -4.0)
    pv_p_max_kw: float = 10.0
    bss_e_cap_kwh: float = 10.0
    bss_p_max_kw: float = 6.0
    bss_soc0: float = 0.5
    bss_eta: float = 0.95
    slack_count: int = 1


def build_reference_grid(params: GridParams | None = None) -> GridModel:
    """Build the 10/0.4 kV reference grid with two LV feeders.

    Bus 0 is the MV slack, bus 1 the LV busbar of the secondary substation,
    feeder buses are numbered consecutively from 2.
    """
    p = params or GridParams()
    buses = [Bus(0, p.mv_kv, "slack", "mv"), Bus(1, p.lv_kv, "slack" if p.slack_count > 1 else "pq", "lv_busbar")]
    trafo = Transformer(
        0, 0, 1, p.trafo_s_rated_mva, p.trafo_vk_percent, p.trafo_vkr_percent,
        tap_pos=p.trafo_tap_pos, tap_step_percent=p.trafo_tap_step_percent,
    )
    lines: list[Line] = []
    assets: list[Asset] = []
    counters = {"load": 0, "pv": 0, "bss": 0}
    next_bus = 2
    for feeder_no, kinds in enumerate(p.feeders):
        upstream = 1
        for kind in kinds:
            bus = next_bus
            next_bus += 1
            buses.append(Bus(bus, p.lv_kv, "pq", f"f{feeder_no + 1}_{kind}"))
            lines.append(Line(len(lines), upstream, bus, p.line_r_ohm_per_km, p.line_x_ohm_per_km,
                              p.line_length_km, p.line_i_max_ka))
            n = counters[kind]
            counters[kind] += 1
            if kind == "load":
                p_kw = p.load_p_kw[n % len(p.load_p_kw)]
                assets.append(Asset(f"load{n + 1}", bus, "load", p.load_p_max_kw, p_kw, Profile.constant(p_kw)))
            elif kind == "pv":
                p_kw = p.pv_p_kw[n % len(p.pv_p_kw)]
                assets.append(Asset(f"pv{n + 1}", bus, "pv", p.pv_p_max_kw, p_kw, Profile.constant(p_kw)))
            else:
                assets.append(Asset("bss" if n == 0 else f"bss{n + 1}", bus, "bss", p.bss_p_max_kw))
            upstream = bus
    battery = Battery(p.bss_soc0, p.bss_e_cap_kwh, p.bss_p_max_kw, p.bss_eta) if counters["bss"] else None
    points = default_measurement_points(assets)
    return GridModel(buses, lines, [trafo], assets, battery, points, p.base_mva, p.slack_vm_pu)


def default_measurement_points(assets: Sequence[Asset]) -> list[MeasurementPoint]:
    """Substation P/V at the transformer LV side plus one P point per asset."""
    pts = [
        MeasurementPoint("sub_p", "P", "trafo", 0, "lv"),
        MeasurementPoint("sub_v", "V", "bus", 1),
    ]
    pts += [MeasurementPoint(f"{a.id}_p", "P", "asset", a.id) for a in assets]
    return pts


def feeder_roots(model: GridModel, busbar: int = 1) -> list[int]:
    """Buses directly below ``busbar`` in the radial tree."""
    return model.children().get(busbar, [])
