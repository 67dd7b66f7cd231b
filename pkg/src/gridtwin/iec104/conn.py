"""IEC 104 link-layer state machine for controlling and controlled stations.

``conn_step`` is a pure function: it takes a :class:`ConnState` value and
one event and returns the next state plus a tuple of actions. Times are
integer microseconds of simulation time.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal, Union

from .codec import SEQ_MOD, Apdu, Asdu, UFunction, i_frame, s_frame, u_frame

US = 1_000_000


@dataclass(frozen=True)
class ConnParams:
    k: int = 12
    w: int = 8
    t1_us: int = 15 * US
    t2_us: int = 10 * US
    t3_us: int = 20 * US


@dataclass(frozen=True)
class ConnState:
    role: Literal["controlling", "controlled"]
    params: ConnParams = ConnParams()
    started: bool = False
    closed: bool = False
    vs: int = 0
    vr: int = 0
    ack: int = 0  # oldest unacknowledged send sequence number
    unacked_rx: int = 0
    pending: tuple[Asdu, ...] = ()
    t1_deadline: int | None = None  # oldest unacked I-frame
    u_deadline: int | None = None  # outstanding STARTDT/TESTFR act
    u_waiting: UFunction | None = None
    t2_deadline: int | None = None
    t3_deadline: int | None = None

    @property
    def unacked_tx(self) -> int:
        return (self.vs - self.ack) % SEQ_MOD


# -- events ------------------------------------------------------------------

@dataclass(frozen=True)
class Rx:
    apdu: Apdu
    now: int


@dataclass(frozen=True)
class Send:
    asdu: Asdu
    now: int


@dataclass(frozen=True)
class Start:
    """Controlling station asks to start data transfer."""
    now: int


@dataclass(frozen=True)
class Tick:
    now: int


Event = Union[Rx, Send, Start, Tick]


# -- actions -----------------------------------------------------------------

@dataclass(frozen=True)
class Emit:
    apdu: Apdu


@dataclass(frozen=True)
class Deliver:
    asdu: Asdu


@dataclass(frozen=True)
class Close:
    reason: str


@dataclass(frozen=True)
class Log:
    severity: str
    event: str
    fields: tuple[tuple[str, object], ...] = ()


Action = Union[Emit, Deliver, Close, Log]


def new_connection(role: str, now: int, params: ConnParams | None = None) -> ConnState:
    params = params or ConnParams()
    return ConnState(role=role, params=params, t3_deadline=now + params.t3_us)


def _seq_between(lo: int, x: int, hi: int) -> bool:
    """True if ``x`` lies in ``[lo, hi]`` modulo the sequence space."""
    return (x - lo) % SEQ_MOD <= (hi - lo) % SEQ_MOD


def _violation(state: ConnState, why: str) -> tuple[ConnState, tuple[Action, ...]]:
    return replace(state, closed=True, started=False), (
        Log("ERROR", "iec104_protocol_violation", (("reason", why),)), Close(why))


def _apply_ack(state: ConnState, recv_seq: int, now: int):
    if not _seq_between(state.ack, recv_seq, state.vs):
        return None
    if recv_seq == state.ack:
        return state
    t1 = None if recv_seq == state.vs else now + state.params.t1_us
    return replace(state, ack=recv_seq, t1_deadline=t1)


def _emit_i(state: ConnState, asdu: Asdu, now: int) -> tuple[ConnState, Action]:
    apdu = i_frame(state.vs, state.vr, asdu)
    t1 = state.t1_deadline if state.unacked_tx else now + state.params.t1_us
    state = replace(state, vs=(state.vs + 1) % SEQ_MOD, unacked_rx=0, t2_deadline=None, t1_deadline=t1)
    return state, Emit(apdu)


def _flush(state: ConnState, now: int) -> tuple[ConnState, list[Action]]:
    actions: list[Action] = []
    if not state.started:
        return state, actions
    pending = list(state.pending)
    while pending and state.unacked_tx < state.params.k:
        state, act = _emit_i(state, pending.pop(0), now)
        actions.append(act)
    if len(pending) != len(state.pending):
        state = replace(state, pending=tuple(pending))
    return state, actions


def conn_step(state: ConnState, event: Event) -> tuple[ConnState, tuple[Action, ...]]:
    if state.closed:
        return state, ()
    now = event.now
    p = state.params

    if isinstance(event, Tick):
        return _tick(state, now)

    if isinstance(event, Start):
        if state.role != "controlling" or state.started or state.u_waiting:
            return state, ()
        state = replace(state, u_waiting=UFunction.STARTDT_ACT, u_deadline=now + p.t1_us)
        return state, (Emit(u_frame(UFunction.STARTDT_ACT)),)

    if isinstance(event, Send):
        state = replace(state, pending=state.pending + (event.asdu,))
        state, actions = _flush(state, now)
        if not actions:
            why = "window full" if state.started else "not started"
            actions = [Log("DEBUG", "iec104_tx_deferred", (("reason", why), ("queued", len(state.pending))))]
        return state, tuple(actions)

    # Rx
    apdu = event.apdu
    state = replace(state, t3_deadline=now + p.t3_us)
    actions: list[Action] = []
    if apdu.format == "U":
        fn = apdu.u_function
        if fn is UFunction.STARTDT_ACT:
            if state.role != "controlled":
                return _violation(state, "STARTDT_act received by controlling station")
            state = replace(state, started=True)
            actions.append(Emit(u_frame(UFunction.STARTDT_CON)))
            state, more = _flush(state, now)
            actions += more
        elif fn is UFunction.STARTDT_CON:
            if state.u_waiting is UFunction.STARTDT_ACT:
                state = replace(state, started=True, u_waiting=None, u_deadline=None)
                state, more = _flush(state, now)
                actions += more
        elif fn is UFunction.STOPDT_ACT:
            if state.unacked_rx:
                actions.append(Emit(s_frame(state.vr)))
            state = replace(state, started=False, unacked_rx=0, t2_deadline=None)
            actions.append(Emit(u_frame(UFunction.STOPDT_CON)))
        elif fn is UFunction.STOPDT_CON:
            state = replace(state, started=False, u_waiting=None, u_deadline=None)
        elif fn is UFunction.TESTFR_ACT:
            actions.append(Emit(u_frame(UFunction.TESTFR_CON)))
        elif fn is UFunction.TESTFR_CON:
            if state.u_waiting is UFunction.TESTFR_ACT:
                state = replace(state, u_waiting=None, u_deadline=None)
        return state, tuple(actions)

    if apdu.format == "S":
        new = _apply_ack(state, apdu.recv_seq, now)
        if new is None:
            return _violation(state, f"S-frame acknowledges unsent frame {apdu.recv_seq}")
        state, more = _flush(new, now)
        return state, tuple(more)

    # I-format
    if not state.started:
        return _violation(state, "I-frame before STARTDT")
    if apdu.send_seq != state.vr:
        return _violation(state, f"sequence error: got N(S)={apdu.send_seq}, expected {state.vr}")
    new = _apply_ack(state, apdu.recv_seq, now)
    if new is None:
        return _violation(state, f"I-frame acknowledges unsent frame {apdu.recv_seq}")
    state = replace(new, vr=(new.vr + 1) % SEQ_MOD, unacked_rx=new.unacked_rx + 1)
    actions.append(Deliver(apdu.asdu))
    if state.unacked_rx >= p.w:
        actions.append(Emit(s_frame(state.vr)))
        state = replace(state, unacked_rx=0, t2_deadline=None)
    elif state.t2_deadline is None:
        state = replace(state, t2_deadline=now + p.t2_us)
    state, more = _flush(state, now)
    actions += more
    return state, tuple(actions)


def _tick(state: ConnState, now: int) -> tuple[ConnState, tuple[Action, ...]]:
    due = [d for d in (state.t1_deadline, state.u_deadline, state.t2_deadline, state.t3_deadline)
           if d is not None and d <= now]
    if not due:
        return state, ()
    p = state.params
    if (state.t1_deadline is not None and state.t1_deadline <= now) or (
            state.u_deadline is not None and state.u_deadline <= now):
        state = replace(state, closed=True, started=False)
        return state, (Log("WARN", "iec104_t1_expired", (("unacked", state.unacked_tx),)), Close("t1 expired"))
    actions: list[Action] = []
    if state.t2_deadline is not None and state.t2_deadline <= now:
        if state.unacked_rx:
            actions.append(Emit(s_frame(state.vr)))
        state = replace(state, unacked_rx=0, t2_deadline=None)
    if state.t3_deadline is not None and state.t3_deadline <= now:
        state = replace(state, t3_deadline=now + p.t3_us)
        if state.u_waiting is None:
            state = replace(state, u_waiting=UFunction.TESTFR_ACT, u_deadline=now + p.t1_us)
            actions.append(Emit(u_frame(UFunction.TESTFR_ACT)))
    return state, tuple(actions)
