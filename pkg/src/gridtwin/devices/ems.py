"""Self-consumption energy management: charge the surplus, cover the deficit."""
from __future__ import annotations

import math
from dataclasses import dataclass

from ..powerflow import Battery


@dataclass(frozen=True)
class EmsParams:
    deadband_kw: float = 0.1
    p_max_kw: float = 6.0
    horizon_s: float = 5.0  # SoC headroom look-ahead


def ems_compute_setpoint(p_load_kw: float, p_pv_kw: float, batt: Battery, params: EmsParams) -> float:
    """Charge-positive BSS setpoint.

    ``p_pv_kw`` is generation as a positive number. The result is the
    surplus clamped to the power rating and to the energy the battery can
    still take (or give) over ``horizon_s``.
    """
    surplus = p_pv_kw - p_load_kw
    if abs(surplus) < params.deadband_kw:
        return 0.0
    p = max(-params.p_max_kw, min(params.p_max_kw, surplus))
    hours = params.horizon_s / 3600.0
    eff = math.sqrt(batt.eta)
    energy = batt.soc * batt.e_cap_kwh
    if p > 0:
        p = min(p, (batt.e_cap_kwh - energy) / (eff * hours))
    else:
        p = max(p, -energy * eff / hours)
    return p + 0.0
