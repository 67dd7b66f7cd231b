"""Scenario files: YAML with sections run, grid, profiles, topology, devices, taps, attack.

Loading collects every problem before failing so that a user sees the
whole list at once. Parse errors carry the line number reported by the
YAML parser.
"""
from __future__ import annotations

import ipaddress
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from ..attack import Stage, script_errors
from ..devices import EmsParams, MtuConfig, VrtuConfig, reference_ieds
from ..devices.mtu import CommandHook, HookError
from ..iec104 import ConnParams
from ..netemu import Rule, Topology, TopologyError, reference_topology
from ..netemu.topology import topology_errors
from ..powerflow import GridModel, GridModelError, GridParams, Profile, build_reference_grid

US = 1_000_000

SECTIONS = ("name", "description", "run", "grid", "profiles", "topology", "devices", "taps", "attack")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = list(errors)


@dataclass(frozen=True)
class RunParams:
    duration_s: float = 600.0
    seed: int = 0
    grid_step_s: float = 1.0
    substep_s: float = 0.01

    @property
    def grid_step_us(self) -> int:
        return int(round(self.grid_step_s * US))

    @property
    def substep_us(self) -> int:
        return int(round(self.substep_s * US))

    @property
    def substeps(self) -> int:
        return self.grid_step_us // self.substep_us

    @property
    def grid_steps(self) -> int:
        return int(round(self.duration_s / self.grid_step_s))


@dataclass(frozen=True)
class TapSpec:
    id: str
    node: str | None = None
    link: int | None = None


@dataclass
class ScenarioConfig:
    name: str
    run: RunParams
    grid: GridModel
    topology: Topology
    mtu: MtuConfig
    vrtu: VrtuConfig
    hook: CommandHook = CommandHook()
    blobs: dict[str, bytes] = field(default_factory=dict)
    taps: tuple[TapSpec, ...] = ()
    footholds: tuple[str, ...] = ("attacker_field",)
    stages: tuple[Stage, ...] = ()
    voltage_buses: tuple[int, ...] = ()
    flood_sample: int = 1
    description: str = ""
    source: str | None = None

    def with_overrides(self, seed: int | None = None, duration_s: float | None = None) -> "ScenarioConfig":
        run = self.run
        if seed is not None:
            run = replace(run, seed=int(seed))
        if duration_s is not None:
            run = replace(run, duration_s=float(duration_s))
        errors = _run_errors(run)
        if errors:
            raise ConfigError(errors)
        return replace(self, run=run)


# -- small typed readers ------------------------------------------------------------

class _Reader:
    def __init__(self, errors: list[str]):
        self.errors = errors

    def mapping(self, value, where: str) -> dict:
        if value is None:
            return {}
        if not isinstance(value, dict):
            self.errors.append(f"{where}: expected a mapping")
            return {}
        return value

    def known(self, d: dict, allowed, where: str) -> None:
        for key in d:
            if key not in allowed:
                self.errors.append(f"{where}: unknown key {key!r}")

    def number(self, d: dict, key: str, default, where: str, *, integer=False, minimum=None, positive=False):
        if key not in d:
            return default
        value = d[key]
        ok = isinstance(value, int) if integer else isinstance(value, (int, float))
        if isinstance(value, bool) or not ok or (not integer and not math.isfinite(value)):
            self.errors.append(f"{where}.{key}: expected {'an integer' if integer else 'a number'}, got {value!r}")
            return default
        if positive and value <= 0:
            self.errors.append(f"{where}.{key}: must be > 0")
            return default
        if minimum is not None and value < minimum:
            self.errors.append(f"{where}.{key}: must be >= {minimum}")
            return default
        return value if integer else float(value)

    def boolean(self, d: dict, key: str, default: bool, where: str) -> bool:
        value = d.get(key, default)
        if not isinstance(value, bool):
            self.errors.append(f"{where}.{key}: expected true/false")
            return default
        return value


def _dataclass_numbers(r: _Reader, d: dict, cls, where: str, skip=()) -> dict:
    """Read every numeric field of ``cls`` present in ``d``."""
    out = {}
    for f in fields(cls):
        if f.name in skip or f.name not in d:
            continue
        default = f.default
        if isinstance(default, bool):
            out[f.name] = r.boolean(d, f.name, default, where)
        elif isinstance(default, (int, float)):
            out[f.name] = r.number(d, f.name, default, where, integer=isinstance(default, int))
    return out


def _run_errors(run: RunParams) -> list[str]:
    errors = []
    if run.duration_s <= 0:
        errors.append("run.duration_s: must be > 0")
    if run.grid_step_s <= 0 or run.substep_s <= 0:
        errors.append("run: grid_step_s and substep_s must be > 0")
    elif run.grid_step_us % run.substep_us:
        errors.append("run: grid_step_s must be an integer multiple of substep_s")
    elif abs(run.grid_steps * run.grid_step_s - run.duration_s) > 1e-9:
        errors.append("run.duration_s: must be a whole number of grid steps")
    if not 0 <= run.seed < 2 ** 64:
        errors.append("run.seed: must be an unsigned 64-bit integer")
    return errors


# -- sections -----------------------------------------------------------------------

def _run(r: _Reader, d) -> RunParams:
    d = r.mapping(d, "run")
    r.known(d, {f.name for f in fields(RunParams)}, "run")
    run = RunParams(
        duration_s=r.number(d, "duration_s", 600.0, "run", positive=True),
        seed=r.number(d, "seed", 0, "run", integer=True, minimum=0),
        grid_step_s=r.number(d, "grid_step_s", 1.0, "run", positive=True),
        substep_s=r.number(d, "substep_s", 0.01, "run", positive=True),
    )
    r.errors.extend(_run_errors(run))
    return run


GRID_KEYS = {f.name for f in fields(GridParams)} - {"feeders", "load_p_kw", "pv_p_kw", "slack_count"}


def _grid(r: _Reader, d) -> tuple[GridParams, tuple[int, ...] | None]:
    d = r.mapping(d, "grid")
    r.known(d, GRID_KEYS | {"feeders", "bss", "voltage_buses"}, "grid")
    kw = _dataclass_numbers(r, d, GridParams, "grid", skip=("feeders", "load_p_kw", "pv_p_kw", "slack_count"))
    bss = r.mapping(d.get("bss"), "grid.bss")
    r.known(bss, {"soc0", "e_cap_kwh", "p_max_kw", "eta"}, "grid.bss")
    for key in ("soc0", "e_cap_kwh", "p_max_kw", "eta"):
        if key in bss:
            kw[f"bss_{key}"] = r.number(bss, key, getattr(GridParams, f"bss_{key}"), "grid.bss", minimum=0)
    if "feeders" in d:
        feeders = d["feeders"]
        if (not isinstance(feeders, list) or not feeders
                or not all(isinstance(f, list) and f and all(k in ("load", "pv", "bss") for k in f) for f in feeders)):
            r.errors.append("grid.feeders: expected a list of non-empty lists of load/pv/bss")
        else:
            kw["feeders"] = tuple(tuple(f) for f in feeders)
    buses = None
    if "voltage_buses" in d:
        vb = d["voltage_buses"]
        if not isinstance(vb, list) or not all(isinstance(b, int) and not isinstance(b, bool) for b in vb):
            r.errors.append("grid.voltage_buses: expected a list of bus ids")
        else:
            buses = tuple(vb)
    return GridParams(**kw), buses


def _profile(r: _Reader, value, where: str) -> Profile | None:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return Profile.constant(float(value))
    d = r.mapping(value, where)
    if not d:
        return None
    r.known(d, {"points", "base_kw", "ramp"}, where)
    if "points" in d:
        pts = d["points"]
        try:
            points = tuple((float(t), float(p)) for t, p in pts)
        except (TypeError, ValueError):
            r.errors.append(f"{where}.points: expected a list of [t_s, p_kw] pairs")
            return None
        if not points or any(b[0] <= a[0] for a, b in zip(points, points[1:])):
            r.errors.append(f"{where}.points: times must be strictly increasing and non-empty")
            return None
        return Profile(points)
    base = r.number(d, "base_kw", 0.0, where)
    ramp = r.mapping(d.get("ramp"), f"{where}.ramp")
    if not ramp:
        return Profile.constant(base)
    w = f"{where}.ramp"
    r.known(ramp, {"start_s", "every_s", "step_kw", "total_kw"}, w)
    start = r.number(ramp, "start_s", 0.0, w, minimum=0)
    every = r.number(ramp, "every_s", 1.0, w, positive=True)
    step = r.number(ramp, "step_kw", 0.0, w)
    total = r.number(ramp, "total_kw", 0.0, w)
    if step == 0 or total == 0 or (step > 0) != (total > 0):
        r.errors.append(f"{w}: step_kw and total_kw must be non-zero with the same sign")
        return Profile.constant(base)
    n = int(round(total / step))
    points = [(0.0, base)] + [(start + k * every, base + k * step) for k in range(1, n + 1)]
    return Profile(tuple(points))


def _profiles(r: _Reader, d, params: GridParams) -> dict[str, Profile]:
    d = r.mapping(d, "profiles")
    out = {}
    for asset_id, value in d.items():
        prof = _profile(r, value, f"profiles.{asset_id}")
        if prof is not None:
            out[str(asset_id)] = prof
    return out


def _apply_profiles(r: _Reader, model: GridModel, profiles: dict[str, Profile]) -> GridModel:
    ids = {a.id: a for a in model.assets}
    assets = list(model.assets)
    for asset_id, prof in profiles.items():
        if asset_id not in ids:
            r.errors.append(f"profiles.{asset_id}: unknown asset {asset_id!r} (known: {', '.join(sorted(ids))})")
            continue
        a = ids[asset_id]
        if a.kind == "bss":
            r.errors.append(f"profiles.{asset_id}: the battery is driven by setpoints, not a profile")
            continue
        bad = [p for _, p in prof.points if abs(p) > a.p_max_kw or (a.kind == "load" and p < 0)
               or (a.kind == "pv" and p > 0)]
        if bad:
            r.errors.append(f"profiles.{asset_id}: value {bad[0]} outside the limits of a {a.kind} "
                            f"(|p| <= {a.p_max_kw}, load >= 0, pv <= 0)")
            continue
        assets[assets.index(a)] = replace(a, p_kw=prof.points[0][1], profile=prof)
    model.assets = assets
    return model


def _topology(r: _Reader, d) -> Topology | None:
    d = r.mapping(d, "topology")
    r.known(d, {"latency_ms", "capacity", "rules", "links_down", "flood_sample"}, "topology")
    latency = r.number(d, "latency_ms", 1.0, "topology", minimum=0)
    capacity = r.number(d, "capacity", 1000, "topology", integer=True, minimum=1)
    rules = None
    if "rules" in d:
        rules = []
        if not isinstance(d["rules"], list):
            r.errors.append("topology.rules: expected a list")
        else:
            for k, raw in enumerate(d["rules"]):
                w = f"topology.rules[{k}]"
                raw = r.mapping(raw, w)
                r.known(raw, {"action", "src", "dst", "port"}, w)
                action = raw.get("action")
                if action not in ("allow", "deny"):
                    r.errors.append(f"{w}.action: expected allow or deny")
                    continue
                for key in ("src", "dst"):
                    pat = str(raw.get(key, "*"))
                    if pat != "*":
                        try:
                            ipaddress.ip_network(pat, strict=False)
                        except ValueError:
                            r.errors.append(f"{w}.{key}: bad address {pat!r}")
                port = raw.get("port")
                if port is not None and (not isinstance(port, int) or not 0 < port < 65536):
                    r.errors.append(f"{w}.port: expected 1..65535")
                    port = None
                rules.append(Rule(action, str(raw.get("src", "*")), str(raw.get("dst", "*")), port))
    down = d.get("links_down", [])
    if not isinstance(down, list) or not all(isinstance(x, int) for x in down):
        r.errors.append("topology.links_down: expected a list of link ids")
        down = []
    try:
        topo = reference_topology(int(round(latency * 1000)), capacity, None if rules is None else tuple(rules),
                                  tuple(down))
    except TopologyError as err:
        r.errors.append(f"topology: {err}")
        return None
    known_links = {l.id for l in topo.links}
    for lid in down:
        if lid not in known_links:
            r.errors.append(f"topology.links_down: unknown link {lid}")
    r.errors.extend(f"topology: {e}" for e in topology_errors(topo))
    return topo


def _devices(r: _Reader, d, params: GridParams):
    d = r.mapping(d, "devices")
    r.known(d, {"mtu", "vrtu", "iec104", "fileserver"}, "devices")
    iec = r.mapping(d.get("iec104"), "devices.iec104")
    r.known(iec, {"k", "w", "t1_s", "t2_s", "t3_s"}, "devices.iec104")
    conn = ConnParams(
        k=r.number(iec, "k", 12, "devices.iec104", integer=True, minimum=1),
        w=r.number(iec, "w", 8, "devices.iec104", integer=True, minimum=1),
        t1_us=int(r.number(iec, "t1_s", 15.0, "devices.iec104", positive=True) * US),
        t2_us=int(r.number(iec, "t2_s", 10.0, "devices.iec104", positive=True) * US),
        t3_us=int(r.number(iec, "t3_s", 20.0, "devices.iec104", positive=True) * US),
    )
    if conn.w > conn.k:
        r.errors.append("devices.iec104: w must not exceed k")
    if conn.t2_us >= conn.t1_us:
        r.errors.append("devices.iec104: t2 must be shorter than t1")

    m = r.mapping(d.get("mtu"), "devices.mtu")
    mtu_keys = {"gi_period_s", "stale_s", "reconnect_s", "maintenance_s", "maintenance_timeout_s", "update_name",
                "ems", "hook"}
    r.known(m, mtu_keys, "devices.mtu")
    kw = _dataclass_numbers(r, m, MtuConfig, "devices.mtu")
    for key in ("gi_period_s", "stale_s", "reconnect_s", "maintenance_s", "maintenance_timeout_s"):
        if kw.get(key, 1) <= 0:
            r.errors.append(f"devices.mtu.{key}: must be > 0")
    ems = r.mapping(m.get("ems"), "devices.mtu.ems")
    r.known(ems, {"deadband_kw", "horizon_s"}, "devices.mtu.ems")
    ems_params = EmsParams(r.number(ems, "deadband_kw", 0.1, "devices.mtu.ems", minimum=0), params.bss_p_max_kw,
                           r.number(ems, "horizon_s", 5.0, "devices.mtu.ems", minimum=0))
    hook = CommandHook()
    if "hook" in m:
        try:
            hook = CommandHook.parse(str(m["hook"]))
        except HookError as err:
            r.errors.append(f"devices.mtu.hook: {err}")
    mtu = MtuConfig(**kw, update_name=str(m.get("update_name", "update")), ems=ems_params,
                    bss_e_cap_kwh=params.bss_e_cap_kwh, bss_eta=params.bss_eta, conn=conn)

    v = r.mapping(d.get("vrtu"), "devices.vrtu")
    r.known(v, {f.name for f in fields(VrtuConfig)} - {"services", "conn"}, "devices.vrtu")
    vkw = _dataclass_numbers(r, v, VrtuConfig, "devices.vrtu")
    for key in ("budget", "crash_factor", "crash_after_s", "poll_period_s", "modbus_timeout_s"):
        if key in vkw and vkw[key] <= 0:
            r.errors.append(f"devices.vrtu.{key}: must be > 0")
    creds = v.get("credentials", [])
    if not isinstance(creds, list) or not all(isinstance(c, list) and len(c) == 2 for c in creds):
        r.errors.append("devices.vrtu.credentials: expected a list of [user, password] pairs")
        creds = []
    vrtu = VrtuConfig(**vkw, credentials=tuple((str(u), str(p)) for u, p in creds), conn=conn)

    f = r.mapping(d.get("fileserver"), "devices.fileserver")
    r.known(f, {"blobs"}, "devices.fileserver")
    blobs = {}
    for name, content in r.mapping(f.get("blobs"), "devices.fileserver.blobs").items():
        blobs[str(name)] = str(content).encode()
    return mtu, vrtu, hook, blobs


def _taps(r: _Reader, d, topo: Topology | None) -> tuple[TapSpec, ...]:
    if d is None:
        return (TapSpec("cr", node="mtu"), TapSpec("field", node="vrtu"))
    if not isinstance(d, list):
        r.errors.append("taps: expected a list")
        return ()
    out, ids = [], set()
    nodes = {n.name for n in topo.nodes} if topo else set()
    links = {l.id for l in topo.links} if topo else set()
    for k, raw in enumerate(d):
        w = f"taps[{k}]"
        raw = r.mapping(raw, w)
        r.known(raw, {"id", "node", "link"}, w)
        tid = str(raw.get("id", ""))
        if not tid or not tid.replace("_", "").replace("-", "").isalnum():
            r.errors.append(f"{w}.id: expected a file-name-safe identifier")
            continue
        if tid in ids:
            r.errors.append(f"{w}.id: duplicate tap {tid!r}")
        ids.add(tid)
        if ("node" in raw) == ("link" in raw):
            r.errors.append(f"{w}: give exactly one of node or link")
            continue
        if "node" in raw and topo and raw["node"] not in nodes:
            r.errors.append(f"{w}.node: unknown node {raw['node']!r}")
        if "link" in raw and topo and raw["link"] not in links:
            r.errors.append(f"{w}.link: unknown link {raw['link']!r}")
        out.append(TapSpec(tid, raw.get("node"), raw.get("link")))
    return tuple(out)


def _attack(r: _Reader, d, topo: Topology | None):
    d = r.mapping(d, "attack")
    r.known(d, {"footholds", "stages"}, "attack")
    footholds = d.get("footholds", ["attacker_field"])
    if not isinstance(footholds, list):
        r.errors.append("attack.footholds: expected a list of node names")
        footholds = []
    nodes = {n.name: n for n in topo.nodes} if topo else None
    if nodes is not None:
        for name in footholds:
            if name not in nodes:
                r.errors.append(f"attack.footholds: unknown node {name!r}")
    raw_stages = d.get("stages", []) or []
    if not isinstance(raw_stages, list):
        r.errors.append("attack.stages: expected a list")
        raw_stages = []
    stages = []
    for k, raw in enumerate(raw_stages):
        w = f"attack.stages[{k}]"
        raw = r.mapping(raw, w)
        r.known(raw, {"id", "kind", "at_s", "requires", "from", "duration_s", "params"}, w)
        requires = raw.get("requires", [])
        if isinstance(requires, str):
            requires = [requires]
        params = r.mapping(raw.get("params"), f"{w}.params")
        duration = r.number(raw, "duration_s", None, w) if "duration_s" in raw else None
        stages.append(Stage(str(raw.get("id", f"s{k}")), str(raw.get("kind", "")),
                            r.number(raw, "at_s", 0.0, w), tuple(str(t) for t in requires),
                            str(raw.get("from", "attacker_field")), params, duration))
    links = {l.id for l in topo.links} if topo else None
    r.errors.extend(f"attack: {e}" for e in script_errors(stages, nodes, links))
    return tuple(str(f) for f in footholds), tuple(stages)


# -- entry points -------------------------------------------------------------------

def parse_config(text: str, source: str | None = None) -> ScenarioConfig:
    where = source or "<config>"
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        line = f" line {mark.line + 1}" if mark is not None else ""
        raise ConfigError([f"{where}:{line}: parse error: {getattr(err, 'problem', None) or err}"]) from None
    if not isinstance(doc, dict):
        raise ConfigError([f"{where}: expected a mapping at the top level"])
    errors: list[str] = []
    r = _Reader(errors)
    r.known(doc, SECTIONS, "scenario")
    run = _run(r, doc.get("run"))
    params, vbuses = _grid(r, doc.get("grid"))
    model = None
    try:
        model = build_reference_grid(params)
    except (GridModelError, ValueError) as err:
        errors.append(f"grid: {err}")
    profiles = _profiles(r, doc.get("profiles"), params)
    if model is not None:
        model = _apply_profiles(r, model, profiles)
        bus_ids = [b.id for b in model.buses]
        if vbuses is not None:
            for b in vbuses:
                if b not in bus_ids:
                    errors.append(f"grid.voltage_buses: unknown bus {b}")
        else:
            vbuses = tuple(bus_ids)
    topo = _topology(r, doc.get("topology"))
    flood_sample = r.number(r.mapping(doc.get("topology"), "topology"), "flood_sample", 1, "topology",
                            integer=True, minimum=1)
    if model is not None and topo is not None:
        names = {n.name for n in topo.nodes}
        for spec in reference_ieds([a.id for a in model.assets]):
            if spec.name not in names:
                errors.append(f"grid: {spec.asset or 'substation'} needs IED node {spec.name!r}, "
                              f"which the topology does not have")
    mtu, vrtu, hook, blobs = _devices(r, doc.get("devices"), params)
    taps = _taps(r, doc.get("taps"), topo)
    footholds, stages = _attack(r, doc.get("attack"), topo)
    if errors:
        raise ConfigError([f"{where}: {e}" for e in errors])
    return ScenarioConfig(str(doc.get("name", Path(where).stem)), run, model, topo, mtu, vrtu, hook, blobs, taps,
                          footholds, stages, tuple(vbuses), flood_sample, str(doc.get("description", "")).strip(),
                          source)


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError([f"{path}: {err.strerror or err}"]) from None
    return parse_config(text, str(path))


def scenario_dir() -> Path:
    return Path(__file__).resolve().parent.parent / "scenarios"


def shipped_scenarios() -> dict[str, Path]:
    return {p.stem: p for p in sorted(scenario_dir().glob("*.scenario"))}


def resolve_scenario(name_or_path: str) -> Path:
    """A path, or the stem of a shipped scenario."""
    p = Path(name_or_path)
    if p.exists():
        return p
    shipped = shipped_scenarios()
    stem = p.stem if p.suffix == ".scenario" else name_or_path
    return shipped.get(stem, p)
