"""Two-rate co-simulation: 1 s grid steps, 10 ms network substeps.

Per grid step at time t the kernel samples profiles, applies the setpoint
latched in the BSS IED during the previous step, integrates the battery,
solves the power flow, records a CSV row and refreshes the IED registers.
For t < duration it then runs the substeps t + j*substep: network delivery,
vRTU budget intake, host stacks, device state machines, attack engine.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..attack import AttackEngine
from ..devices import EventLog, FileServer, Ied, Mtu, Vrtu, ioa_roles, reference_ieds
from ..netemu import Tap, build_network, pcap_bytes
from ..powerflow import PowerFlowError, bus_injections, measure, sample_profiles, solve_power_flow, step_battery
from .config import ScenarioConfig

US = 1_000_000


def csv_columns(config: ScenarioConfig) -> list[str]:
    return (["t_s"] + [f"v_pu_{b}" for b in config.voltage_buses]
            + ["substation_p_kw", "bss_p_kw", "bss_soc", "pv_p_kw", "load_p_kw", "measurement_age_s", "losses_kw"])


@dataclass
class RunResult:
    config: ScenarioConfig
    columns: list[str]
    rows: list[list[float]]
    log: EventLog
    taps: list[Tap]
    summary: dict
    aborted: bool = False
    abort_reason: str | None = None
    twin: "Twin | None" = field(default=None, repr=False)

    def column(self, name: str) -> list[float]:
        k = self.columns.index(name)
        return [row[k] for row in self.rows]

    def row_at(self, t_s: float) -> dict[str, float]:
        for row in self.rows:
            if abs(row[0] - t_s) < 1e-9:
                return dict(zip(self.columns, row))
        raise KeyError(t_s)


class Twin:
    """Wires grid, network, devices and (optionally) the attack engine."""

    def __init__(self, config: ScenarioConfig, with_attack: bool = True):
        self.cfg = config
        self.model = config.grid
        self.battery = self.model.battery
        self.bss = self.model.bss()
        self.log = EventLog()
        self.net = build_network(config.topology, config.run.seed)
        self.taps = [self.net.add_tap(Tap(t.id, t.node, t.link)) for t in config.taps]
        specs = reference_ieds([a.id for a in self.model.assets])
        host = self.net.hosts
        self.ieds = {s.name: Ied(s, host[s.name], self.log) for s in specs}
        self.bss_ied = next((self.ieds[s.name] for s in specs if s.setpoint is not None), None)
        self.vrtu = Vrtu("vrtu", host["vrtu"], specs, self.log, config.vrtu)
        self.mtu = Mtu("mtu", host["mtu"], ioa_roles(specs), self.log, config.mtu)
        self.mtu.hook = config.hook
        self.fileserver = FileServer("fileserver", host["fileserver"], self.log, config.blobs)
        self.engine = None
        if with_attack:
            self.engine = AttackEngine(list(config.stages), self.net, self.log, config.run.seed,
                                       config.footholds, config.run.substep_us)
        # hosts in node id order so delivery handling never depends on dict order
        self.hosts = [(n.name, host[n.name]) for n in sorted(config.topology.hosts(), key=lambda n: n.id)]
        self.devices = [self.mtu.step, self.fileserver.step, self.vrtu.step] + [i.step for i in self.ieds.values()]
        if self.engine is not None and self.engine.stages:
            self.devices.append(self.engine.step)
        self.applied_setpoint = 0.0
        self.pf_iterations: list[int] = []

    # -- grid side ---------------------------------------------------------------

    def grid_step(self, t_us: int) -> list[float]:
        t_s = t_us / US
        sampled = sample_profiles(self.model, t_s)
        asset_p = {aid: p for aid, (p, _) in sampled.items()}
        p_bss, soc = 0.0, math.nan
        if self.bss is not None and self.battery is not None:
            latched = self.bss_ied.take_setpoint() if self.bss_ied is not None else None
            p_set = 0.0 if latched is None else latched
            if p_set != self.applied_setpoint:
                self.log.log(t_us, "grid", "INFO", "setpoint_applied", asset=self.bss.id, value=p_set)
                self.applied_setpoint = p_set
            self.battery, p_bss = step_battery(self.battery, p_set, self.cfg.run.grid_step_s)
            asset_p[self.bss.id] = p_bss
            soc = self.battery.soc
        p_bus, q_bus = bus_injections(self.model, asset_p)
        state = solve_power_flow(self.model, p_bus, q_bus)
        self.pf_iterations.append(state.iterations)
        load = sum(p for aid, p in asset_p.items() if self.model.asset(aid).kind == "load")
        pv = sum(p for aid, p in asset_p.items() if self.model.asset(aid).kind == "pv")
        line_losses = sum(b.loss_kw for b in state.branches if b.kind == "line")
        row = ([t_s] + [state.vm(b) for b in self.cfg.voltage_buses]
               + [state.substation_p_kw, p_bss, soc, pv, load, self.mtu.measurement_age_s(t_us), line_losses])
        values = {m.point_id: m.value for m in measure(self.model, state, None, asset_p, t_s)}
        values["bss_soc"] = soc
        for ied in self.ieds.values():
            ied.refresh({reg: values[point] for reg, point, _ in ied.spec.monitors})
        return row

    # -- network side --------------------------------------------------------------

    def substep(self, now: int) -> None:
        delivered = self.net.step(now)
        for name, host in self.hosts:
            frames = delivered.get(name, ())
            if host is self.vrtu.host:
                frames = self.vrtu.intake(list(frames), now)
            if frames:
                host.receive(frames, now)
        for step in self.devices:
            step(now)

    # -- whole run ------------------------------------------------------------------

    def run(self) -> RunResult:
        run = self.cfg.run
        columns = csv_columns(self.cfg)
        rows: list[list[float]] = []
        aborted, reason = False, None
        for k in range(run.grid_steps + 1):
            t_us = k * run.grid_step_us
            try:
                rows.append(self.grid_step(t_us))
            except PowerFlowError as err:
                rows.append([t_us / US] + [math.nan] * (len(columns) - 1))
                aborted, reason = True, str(err)
                self.log.log(t_us, "grid", "CRIT", "powerflow_abort", error=type(err).__name__)
                break
            if k == run.grid_steps:
                break
            for j in range(run.substeps):
                self.substep(t_us + j * run.substep_us)
        return RunResult(self.cfg, columns, rows, self.log, self.taps, self.summary(rows, aborted, reason),
                         aborted, reason, self)

    def summary(self, rows, aborted: bool, reason: str | None) -> dict:
        run = self.cfg.run
        its = self.pf_iterations
        mtu_cmds = self.mtu.commands
        out = {
            "scenario": self.cfg.name,
            "seed": run.seed,
            "duration_s": run.duration_s,
            "grid_step_s": run.grid_step_s,
            "substep_s": run.substep_s,
            "rows": len(rows),
            "aborted": aborted,
            "abort_reason": reason,
            "abort_t_s": rows[-1][0] if aborted else None,
            "powerflow": {"solves": len(its), "max_iterations": max(its, default=0),
                          "mean_iterations": round(sum(its) / len(its), 6) if its else 0.0},
            "network": {k: int(v) for k, v in sorted(self.net.counters.items())},
            "vrtu": {"alive": self.vrtu.alive, **{k: int(v) for k, v in sorted(self.vrtu.counters.items())}},
            "mtu": {"commands": len(mtu_cmds), "hook": str(self.mtu.hook),
                    "stale_alarms": len(self.log.find("measurement_stale", "mtu")),
                    "last_command_kw": mtu_cmds[-1][2] if mtu_cmds else None},
            "taps": {t.id: len(t.records) for t in self.taps},
        }
        if self.engine is not None and self.engine.stages:
            out["attack"] = self.engine.summary()
        return out


def run_scenario(config: ScenarioConfig, with_attack: bool = True) -> RunResult:
    return Twin(config, with_attack).run()


# -- artifacts ----------------------------------------------------------------------

def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.6f}"


def csv_text(result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(result.columns)
    for row in result.rows:
        w.writerow([f"{row[0]:.3f}"] + [_fmt(x) for x in row[1:]])
    return buf.getvalue()


def write_outputs(result: RunResult, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"results": out / "results.csv", "events": out / "events.log", "summary": out / "summary.json"}
    paths["results"].write_text(csv_text(result))
    paths["events"].write_text(result.log.text())
    paths["summary"].write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    topo = result.config.topology
    for tap in result.taps:
        path = out / f"{tap.id}.pcap"
        path.write_bytes(pcap_bytes(tap.records, topo, result.config.flood_sample))
        paths[f"pcap:{tap.id}"] = path
    return paths
