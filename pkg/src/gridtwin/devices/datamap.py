"""Addressing shared by MTU, vRTU and IEDs: register layout and IOA plan."""
from __future__ import annotations

from dataclasses import dataclass

COMMON_ADDRESS = 1
UNIT_ID = 1

# register layout of every IED (float32, high word first)
REG_P = 0
REG_V = 2
REG_SOC = 4
REG_SETPOINT = 10

IOA_LOAD_BASE = 1000  # load k -> 1000 + k
IOA_PV_BASE = 1010  # pv k -> 1010 + k
IOA_BSS_P = 1021
IOA_BSS_SOC = 1022
IOA_SUB_P = 1031
IOA_SUB_V = 1032
IOA_BSS_SETPOINT = 2001


@dataclass(frozen=True)
class IedSpec:
    """One field IED: which quantities it meters and where they go."""

    name: str
    asset: str | None  # bound asset id, None for the substation meter
    # (register, measurement point id, ioa) for each monitored value
    monitors: tuple[tuple[int, str, int], ...]
    setpoint: tuple[int, str, int] | None = None  # (register, binding, ioa)

    @property
    def read_span(self) -> tuple[int, int]:
        regs = [r for r, _, _ in self.monitors]
        return min(regs), max(regs) + 2 - min(regs)


def reference_ieds(asset_ids: list[str]) -> list[IedSpec]:
    """IEDs for the reference grid: one substation meter plus one per asset."""
    specs = [IedSpec("ied_sub", None, ((REG_P, "sub_p", IOA_SUB_P), (REG_V, "sub_v", IOA_SUB_V)))]
    loads = sorted(a for a in asset_ids if a.startswith("load"))
    pvs = sorted(a for a in asset_ids if a.startswith("pv"))
    for k, a in enumerate(loads, 1):
        specs.append(IedSpec(f"ied_{a}", a, ((REG_P, f"{a}_p", IOA_LOAD_BASE + k),)))
    for k, a in enumerate(pvs, 1):
        specs.append(IedSpec(f"ied_{a}", a, ((REG_P, f"{a}_p", IOA_PV_BASE + k),)))
    if "bss" in asset_ids:
        specs.append(IedSpec("ied_bss", "bss", ((REG_P, "bss_p", IOA_BSS_P), (REG_SOC, "bss_soc", IOA_BSS_SOC)),
                             (REG_SETPOINT, "bss.setpoint", IOA_BSS_SETPOINT)))
    return specs


def ioa_roles(specs: list[IedSpec]) -> dict[int, str]:
    """IOA -> measurement point id (what the MTU needs to run the EMS)."""
    out = {}
    for spec in specs:
        for _, point, ioa in spec.monitors:
            out[ioa] = point
    return out
