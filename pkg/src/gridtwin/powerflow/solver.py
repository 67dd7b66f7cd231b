"""Polar Newton-Raphson AC power flow."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import GridModel

TOLERANCE_PU = 1e-8
MAX_ITER = 25


class PowerFlowError(RuntimeError):
    pass


class PowerFlowDiverged(PowerFlowError):
    def __init__(self, iterations: int, mismatch: float):
        super().__init__(f"power flow did not converge after {iterations} iterations "
                         f"(max mismatch {mismatch:.3e} pu)")
        self.iterations = iterations
        self.mismatch = mismatch


class SingularJacobian(PowerFlowError):
    pass


@dataclass(frozen=True)
class BranchFlow:
    kind: str
    id: int
    from_bus: int
    to_bus: int
    p_from_kw: float
    q_from_kvar: float
    p_to_kw: float
    q_to_kvar: float
    i_from_a: float
    i_to_a: float

    @property
    def loss_kw(self) -> float:
        return self.p_from_kw + self.p_to_kw


@dataclass(frozen=True)
class GridState:
    bus_ids: tuple[int, ...]
    vm_pu: tuple[float, ...]
    va_rad: tuple[float, ...]
    branches: tuple[BranchFlow, ...]
    slack_p_kw: float
    slack_q_kvar: float
    injections_p_kw: tuple[float, ...]
    iterations: int
    converged: bool
    max_mismatch_pu: float

    def vm(self, bus: int) -> float:
        return self.vm_pu[self.bus_ids.index(bus)]

    def branch(self, kind: str, ident: int) -> BranchFlow:
        for b in self.branches:
            if b.kind == kind and b.id == ident:
                return b
        raise KeyError((kind, ident))

    @property
    def losses_kw(self) -> float:
        return sum(b.loss_kw for b in self.branches)

    @property
    def substation_p_kw(self) -> float:
        """Active power through the secondary substation, metered at the LV side.

        Positive means the LV network imports from the MV grid.
        """
        trafos = [b for b in self.branches if b.kind == "trafo"]
        return -sum(b.p_to_kw for b in trafos)


def _branch_admittances(model: GridModel):
    """Yield ``(kind, id, f, t, y_series, tap)`` in per-unit."""
    kv = {b.id: b.nominal_kv for b in model.buses}
    for t in model.transformers:
        zk = t.vk_percent / 100.0 * model.base_mva / t.s_rated_mva
        rk = t.vkr_percent / 100.0 * model.base_mva / t.s_rated_mva
        xk = math.sqrt(max(zk * zk - rk * rk, 0.0))
        yield "trafo", t.id, t.hv_bus, t.lv_bus, 1.0 / complex(rk, xk), t.ratio
    for ln in model.lines:
        z_base = kv[ln.to_bus] ** 2 / model.base_mva
        z = complex(ln.r_ohm_per_km, ln.x_ohm_per_km) * ln.length_km / z_base
        yield "line", ln.id, ln.from_bus, ln.to_bus, 1.0 / z, 1.0


def build_ybus(model: GridModel) -> np.ndarray:
    idx = model.bus_index
    n = len(model.buses)
    ybus = np.zeros((n, n), dtype=complex)
    for _, _, f, t, y, tap in _branch_admittances(model):
        i, j = idx[f], idx[t]
        ybus[i, i] += y / (tap * tap)
        ybus[j, j] += y
        ybus[i, j] -= y / tap
        ybus[j, i] -= y / tap
    return ybus


def _mismatch(ybus, v, s_spec, pq):
    s_calc = v * np.conj(ybus @ v)
    d = s_spec - s_calc
    non_slack = np.r_[pq]
    return np.r_[d.real[non_slack], d.imag[pq]]


def solve_power_flow(model: GridModel, p_kw: dict[int, float], q_kvar: dict[int, float] | None = None,
                     tol: float = TOLERANCE_PU, max_iter: int = MAX_ITER) -> GridState:
    """Solve the steady state for per-bus load-positive injections.

    Buses missing from ``p_kw``/``q_kvar`` get zero injection.
    """
    q_kvar = q_kvar or {}
    idx = model.bus_index
    unknown = (set(p_kw) | set(q_kvar)) - set(idx)
    if unknown:
        raise PowerFlowError(f"injections reference unknown buses {sorted(unknown)}")
    n = len(model.buses)
    scale = 1000.0 * model.base_mva
    s_spec = np.zeros(n, dtype=complex)
    for bus, p in p_kw.items():
        s_spec[idx[bus]] -= p / scale
    for bus, q in q_kvar.items():
        s_spec[idx[bus]] -= 1j * q / scale

    ybus = build_ybus(model)
    slack = idx[model.slack.id]
    pq = np.array([i for i in range(n) if i != slack], dtype=int)
    vm = np.ones(n)
    va = np.zeros(n)
    vm[slack] = model.slack_vm_pu
    v = vm * np.exp(1j * va)

    iterations = 0
    f = _mismatch(ybus, v, s_spec, pq)
    mismatch = float(np.max(np.abs(f))) if f.size else 0.0
    npq = len(pq)
    while mismatch >= tol:
        if iterations >= max_iter:
            raise PowerFlowDiverged(iterations, mismatch)
        ibus = ybus @ v
        diag_v = np.diag(v)
        diag_i = np.diag(ibus)
        diag_vnorm = np.diag(v / np.abs(v))
        ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
        ds_dvm = diag_v @ np.conj(ybus @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm
        jac = np.block([
            [ds_dva.real[np.ix_(pq, pq)], ds_dvm.real[np.ix_(pq, pq)]],
            [ds_dva.imag[np.ix_(pq, pq)], ds_dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(f"singular Jacobian at iteration {iterations}") from exc
        va[pq] += dx[:npq]
        vm[pq] += dx[npq:]
        v = vm * np.exp(1j * va)
        iterations += 1
        f = _mismatch(ybus, v, s_spec, pq)
        mismatch = float(np.max(np.abs(f)))
        if not math.isfinite(mismatch):
            raise PowerFlowDiverged(iterations, mismatch)

    flows = []
    for kind, ident, fb, tb, y, tap in _branch_admittances(model):
        i, j = idx[fb], idx[tb]
        i_from = (v[i] / tap - v[j]) * y / tap
        i_to = (v[j] - v[i] / tap) * y
        s_from = v[i] * np.conj(i_from) * scale
        s_to = v[j] * np.conj(i_to) * scale
        i_base_f = model.base_mva / (math.sqrt(3) * model.buses[i].nominal_kv) * 1000.0
        i_base_t = model.base_mva / (math.sqrt(3) * model.buses[j].nominal_kv) * 1000.0
        flows.append(BranchFlow(kind, ident, fb, tb, float(s_from.real), float(s_from.imag),
                                float(s_to.real), float(s_to.imag),
                                float(abs(i_from) * i_base_f), float(abs(i_to) * i_base_t)))
    # power leaving the slack bus into the network
    s_slack = v[slack] * np.conj((ybus @ v)[slack]) * scale
    p_slack = float(s_slack.real)
    return GridState(
        bus_ids=tuple(b.id for b in model.buses),
        vm_pu=tuple(float(x) for x in np.abs(v)),
        va_rad=tuple(float(x) for x in np.angle(v)),
        branches=tuple(flows),
        slack_p_kw=p_slack,
        slack_q_kvar=float(s_slack.imag),
        injections_p_kw=tuple(float(p_kw.get(b.id, 0.0)) for b in model.buses),
        iterations=iterations,
        converged=True,
        max_mismatch_pu=mismatch,
    )
