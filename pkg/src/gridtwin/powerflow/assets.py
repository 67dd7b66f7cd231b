"""Battery stepping, profile lookup and measurement extraction."""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, replace

from .model import Battery, GridModel, MeasurementPoint, Profile
from .solver import GridState


class ProfileError(ValueError):
    pass


class MeasurementError(KeyError):
    pass


def step_battery(batt: Battery, p_set_kw: float, dt_s: float) -> tuple[Battery, float]:
    """Integrate one step of a charge-positive setpoint.

    The setpoint is clipped to the power rating and to what the state of
    charge can absorb or deliver within ``dt_s``. Returns the new battery
    and the realized power.
    """
    if dt_s <= 0:
        raise ValueError("dt_s must be positive")
    eff = math.sqrt(batt.eta)
    energy_kwh = batt.soc * batt.e_cap_kwh
    p = max(-batt.p_max_kw, min(batt.p_max_kw, p_set_kw))
    hours = dt_s / 3600.0
    if p > 0:
        headroom = (batt.e_cap_kwh - energy_kwh) / (eff * hours)
        p = min(p, headroom)
        delta = eff * p * hours
    elif p < 0:
        available = energy_kwh * eff / hours
        p = max(p, -available)
        delta = p * hours / eff
    else:
        delta = 0.0
    soc = min(1.0, max(0.0, (energy_kwh + delta) / batt.e_cap_kwh))
    if p == 0.0:
        p = 0.0  # normalise -0.0
    return replace(batt, soc=soc), p


def profile_value(profile: Profile, t_s: float) -> float:
    """Step-hold lookup; values before the first breakpoint take the first value."""
    if not profile.points:
        raise ProfileError("empty profile")
    times = [pt[0] for pt in profile.points]
    k = bisect.bisect_right(times, t_s) - 1
    return profile.points[max(k, 0)][1]


def sample_profiles(model: GridModel, t_s: float) -> dict[str, tuple[float, float]]:
    """Per-asset ``(p_kw, q_kvar)`` for every profiled (load and pv) asset."""
    out = {}
    for a in model.assets:
        if a.kind == "bss":
            continue
        if a.profile is None:
            raise ProfileError(f"asset {a.id} has no profile")
        p = profile_value(a.profile, t_s)
        out[a.id] = (p, p * a.q_ratio)
    return out


def bus_injections(model: GridModel, asset_p: dict[str, float]) -> tuple[dict[int, float], dict[int, float]]:
    """Aggregate per-asset active power to per-bus P and Q."""
    p_bus: dict[int, float] = {}
    q_bus: dict[int, float] = {}
    for a in model.assets:
        p = asset_p.get(a.id, 0.0)
        p_bus[a.bus] = p_bus.get(a.bus, 0.0) + p
        q_bus[a.bus] = q_bus.get(a.bus, 0.0) + p * a.q_ratio
    return p_bus, q_bus


@dataclass(frozen=True)
class Measurement:
    point_id: str
    quantity: str
    value: float
    t_s: float


def measure(model: GridModel, state: GridState, points: list[MeasurementPoint] | None = None,
            asset_p: dict[str, float] | None = None, t_s: float = 0.0) -> list[Measurement]:
    """Read sensor values out of a solved state.

    V is line-to-line volts, P/Q in kW/kvar (load-positive for assets,
    direction-of-flow into the LV side for the transformer), I in amps.
    """
    points = model.measurement_points if points is None else points
    asset_p = asset_p or {}
    kv = {b.id: b.nominal_kv for b in model.buses}
    out = []
    for pt in points:
        if pt.element == "bus":
            if pt.ref not in kv or pt.quantity != "V":
                raise MeasurementError(pt.id)
            value = state.vm(pt.ref) * kv[pt.ref] * 1000.0
        elif pt.element in ("line", "trafo"):
            try:
                br = state.branch(pt.element, pt.ref)
            except KeyError:
                raise MeasurementError(pt.id) from None
            hv = pt.side == "hv" if pt.element == "trafo" else True
            if pt.quantity == "P":
                value = br.p_from_kw if hv else -br.p_to_kw
            elif pt.quantity == "Q":
                value = br.q_from_kvar if hv else -br.q_to_kvar
            elif pt.quantity == "I":
                value = br.i_from_a if hv else br.i_to_a
            else:
                value = state.vm(br.from_bus if hv else br.to_bus) * kv[br.from_bus if hv else br.to_bus] * 1000
        elif pt.element == "asset":
            try:
                asset = model.asset(pt.ref)
            except KeyError:
                raise MeasurementError(pt.id) from None
            p = asset_p.get(asset.id, 0.0)
            if pt.quantity == "P":
                value = p
            elif pt.quantity == "Q":
                value = p * asset.q_ratio
            elif pt.quantity == "V":
                value = state.vm(asset.bus) * kv[asset.bus] * 1000.0
            else:
                vm = state.vm(asset.bus) * kv[asset.bus]
                value = math.hypot(p, p * asset.q_ratio) / (math.sqrt(3) * vm)
        else:
            raise MeasurementError(pt.id)
        out.append(Measurement(pt.id, pt.quantity, float(value), t_s))
    return out


def select_points(model: GridModel, ids: list[str]) -> list[MeasurementPoint]:
    by_id = {p.id: p for p in model.measurement_points}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise MeasurementError(f"unknown measurement points {missing}")
    return [by_id[i] for i in ids]
