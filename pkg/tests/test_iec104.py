import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridtwin.iec104 import (COT_ACTIVATION, COT_SPONTANEOUS, M_ME_NC_1, Apdu, Asdu,
                             Close, ConnParams, Deliver, Emit, InfoObject, Rx, Send, Start, Tick, UFunction,
                             conn_step, decode_apdu, encode_apdu, new_connection, read_apdu, split_stream)
from gridtwin.iec104.codec import FramingError, Iec104Error, NeedMoreBytes, OversizeAsdu, UnknownTypeId, s_frame, u_frame

from strategies import apdus

US = 1_000_000

STARTDT_ACT = bytes.fromhex("680407000000")
S_FRAME_2 = bytes.fromhex("680401000400")
I_FRAME_M_ME = bytes.fromhex("68120000 00000D01 03000100 64000000 00C03F00".replace(" ", ""))


def measurement_asdu(value=1.5, ioa=100, cot=COT_SPONTANEOUS):
    return Asdu(M_ME_NC_1, cot, 1, (InfoObject(ioa, value, 0),))


class TestGoldenBytes:
    def test_startdt_act(self):
        assert encode_apdu(u_frame(UFunction.STARTDT_ACT)) == STARTDT_ACT

    def test_s_frame(self):
        assert encode_apdu(s_frame(2)) == S_FRAME_2

    def test_i_frame_short_float(self):
        assert encode_apdu(Apdu("I", 0, 0, asdu=measurement_asdu())) == I_FRAME_M_ME

    def test_startdt_con_decodes(self):
        assert decode_apdu(bytes.fromhex("68040B000000")) == u_frame(UFunction.STARTDT_CON)

    def test_scapy_dissects_goldens(self):
        pytest.importorskip("scapy.contrib.scada.iec104")
        from scapy.all import IP, TCP, Ether, raw
        for payload in (STARTDT_ACT, S_FRAME_2, I_FRAME_M_ME):
            pkt = Ether(raw(Ether() / IP() / TCP(sport=2404, dport=40000) / payload))
            layer = pkt[TCP].payload
            assert layer.__class__.__name__.startswith("IEC104_")
            assert "Raw" not in pkt
        pkt = Ether(raw(Ether() / IP() / TCP(sport=2404, dport=40000) / I_FRAME_M_ME))
        io = pkt[TCP].payload.io[0]
        assert io.information_object_address == 100 and io.scaled_value == 1.5


class TestDecode:
    def test_truncated_needs_more(self):
        with pytest.raises(NeedMoreBytes) as exc:
            read_apdu(bytes.fromhex("68120000"))
        assert exc.value.needed == 16

    def test_bad_start_byte(self):
        with pytest.raises(FramingError):
            decode_apdu(bytes.fromhex("690407000000"))

    def test_unknown_type_is_consumed(self):
        frame = bytearray(I_FRAME_M_ME)
        frame[6] = 9  # M_ME_NA_1, outside the subset
        with pytest.raises(UnknownTypeId) as exc:
            decode_apdu(bytes(frame))
        assert exc.value.consumed == len(frame)
        out, rest = split_stream(bytes(frame) + STARTDT_ACT)
        assert isinstance(out[0], UnknownTypeId) and out[1] == u_frame(UFunction.STARTDT_ACT) and rest == b""

    def test_length_mismatch(self):
        with pytest.raises(FramingError):
            decode_apdu(I_FRAME_M_ME + b"\x00")
        bad = bytearray(I_FRAME_M_ME)
        bad[1] = 0x11
        with pytest.raises(Iec104Error):
            decode_apdu(bytes(bad[:-1]))

    def test_split_stream_keeps_partial(self):
        out, rest = split_stream(STARTDT_ACT + I_FRAME_M_ME[:7])
        assert out == [u_frame(UFunction.STARTDT_ACT)] and rest == I_FRAME_M_ME[:7]

    def test_sq_run(self):
        asdu = Asdu(M_ME_NC_1, 20, 1, tuple(InfoObject(500 + k, float(k), 0) for k in range(3)), sq=True)
        raw = encode_apdu(Apdu("I", 3, 4, asdu=asdu))
        # one IOA (3 bytes) + 3 elements of 5 bytes
        assert len(raw) == 2 + 4 + 6 + 3 + 15
        assert decode_apdu(raw).asdu == asdu

    def test_oversize(self):
        objs = tuple(InfoObject(k, 0.0, 0) for k in range(31))
        with pytest.raises(OversizeAsdu):
            encode_apdu(Apdu("I", 0, 0, asdu=Asdu(M_ME_NC_1, 3, 1, objs)))

    def test_unsupported_type_rejected_on_encode(self):
        with pytest.raises(UnknownTypeId):
            Asdu(9, 3, 1, (InfoObject(1, 0.0),))


@settings(max_examples=500, deadline=None)
@given(apdus)
def test_roundtrip(apdu):
    assert decode_apdu(encode_apdu(apdu)) == apdu


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=300))
def test_decode_total(data):
    try:
        decode_apdu(data)
    except Iec104Error:
        pass
    out, rest = split_stream(data)
    assert len(rest) <= len(data)


# -- connection state machine -------------------------------------------------

def run(state, event):
    return conn_step(state, event)


def emitted(actions):
    return [a.apdu for a in actions if isinstance(a, Emit)]


class TestConn:
    def test_controlled_handshake(self):
        s = new_connection("controlled", 0)
        s, acts = run(s, Rx(u_frame(UFunction.STARTDT_ACT), 10))
        assert s.started
        assert emitted(acts) == [u_frame(UFunction.STARTDT_CON)]

    def test_window_blocks_thirteenth(self):
        s = new_connection("controlling", 0)
        s, _ = run(s, Start(0))
        s, _ = run(s, Rx(u_frame(UFunction.STARTDT_CON), 1))
        for k in range(12):
            s, acts = run(s, Send(measurement_asdu(float(k)), 2))
            assert len(emitted(acts)) == 1
        s, acts = run(s, Send(measurement_asdu(99.0), 3))
        assert emitted(acts) == [] and len(s.pending) == 1
        # an S-frame acknowledging 4 frames releases the queued one
        s, acts = run(s, Rx(s_frame(4), 4))
        assert [a.send_seq for a in emitted(acts)] == [12]

    def test_no_i_frames_before_startdt_con(self):
        s = new_connection("controlling", 0)
        s, acts = run(s, Send(measurement_asdu(), 0))
        assert emitted(acts) == []
        s, _ = run(s, Start(1))
        s, acts = run(s, Rx(u_frame(UFunction.STARTDT_CON), 2))
        assert [a.format for a in emitted(acts)] == ["I"]

    def test_t3_testfr(self):
        s = new_connection("controlled", 0)
        s, acts = run(s, Tick(20 * US - 1))
        assert acts == ()
        s, acts = run(s, Tick(20 * US))
        assert emitted(acts) == [u_frame(UFunction.TESTFR_ACT)]

    def test_t1_expiry_closes(self):
        s = new_connection("controlling", 0)
        s, _ = run(s, Start(0))
        s, _ = run(s, Rx(u_frame(UFunction.STARTDT_CON), 1))
        s, _ = run(s, Send(measurement_asdu(), 2))
        s, acts = run(s, Tick(2 + 15 * US))
        assert s.closed and any(isinstance(a, Close) for a in acts)

    def test_t2_sends_s_frame(self):
        s = new_connection("controlled", 0)
        s, _ = run(s, Rx(u_frame(UFunction.STARTDT_ACT), 0))
        s, _ = run(s, Rx(Apdu("I", 0, 0, asdu=measurement_asdu(cot=COT_ACTIVATION)), 5))
        s, acts = run(s, Tick(5 + 10 * US))
        assert emitted(acts) == [s_frame(1)]

    def test_w_rule(self):
        s = new_connection("controlled", 0)
        s, _ = run(s, Rx(u_frame(UFunction.STARTDT_ACT), 0))
        out = []
        for k in range(8):
            s, acts = run(s, Rx(Apdu("I", k, 0, asdu=measurement_asdu()), 10 + k))
            out += emitted(acts)
        assert out == [s_frame(8)] and s.unacked_rx == 0

    def test_i_frame_before_start_is_violation(self):
        s = new_connection("controlled", 0)
        s, acts = run(s, Rx(Apdu("I", 0, 0, asdu=measurement_asdu()), 1))
        assert s.closed and any(isinstance(a, Close) for a in acts)

    def test_ack_of_unsent_is_violation(self):
        s = new_connection("controlled", 0)
        s, _ = run(s, Rx(u_frame(UFunction.STARTDT_ACT), 0))
        s, acts = run(s, Rx(s_frame(3), 1))
        assert s.closed

    def test_deliver(self):
        s = new_connection("controlled", 0)
        s, _ = run(s, Rx(u_frame(UFunction.STARTDT_ACT), 0))
        a = measurement_asdu()
        s, acts = run(s, Rx(Apdu("I", 0, 0, asdu=a), 1))
        assert Deliver(a) in acts


def dialogue(ops, params=ConnParams()):
    """Drive a controlling and a controlled peer over a lossless channel.

    ``ops`` is a list of (who, kind) with who in {0, 1} and kind in
    {"send", "deliver", "tick"}. Returns the per-step states.
    """
    now = 0
    peers = [new_connection("controlling", 0, params), new_connection("controlled", 0, params)]
    wires = [[], []]  # frames in flight towards peer i
    sent_counts = [0, 0]
    peers[0], acts = conn_step(peers[0], Start(0))
    wires[1] += emitted(acts)
    history = []
    for who, kind in ops:
        now += 1000
        if kind == "send":
            peers[who], acts = conn_step(peers[who], Send(measurement_asdu(1.0), now))
        elif kind == "deliver" and wires[who]:
            apdu = wires[who].pop(0)
            peers[who], acts = conn_step(peers[who], Rx(apdu, now))
        else:
            peers[who], acts = conn_step(peers[who], Tick(now))
        for apdu in emitted(acts):
            if apdu.format == "I":
                sent_counts[who] += 1
            wires[1 - who].append(apdu)
        history.append((tuple(peers), [list(w) for w in wires], list(sent_counts)))
    return history


ops_strategy = st.lists(st.tuples(st.integers(0, 1), st.sampled_from(["send", "deliver", "deliver", "tick"])),
                        max_size=200)


@settings(max_examples=200, deadline=None)
@given(ops_strategy)
def test_dialogue_window_and_ack_safety(ops):
    for peers, wires, sent in dialogue(ops):
        for p in peers:
            assert p.unacked_tx <= p.params.k
            assert not p.closed
        for who in (0, 1):
            for apdu in wires[who]:
                if apdu.format in ("I", "S"):
                    # recv_seq acknowledges only frames the peer has actually emitted
                    assert apdu.recv_seq <= sent[1 - who] % 32768 or sent[1 - who] >= 32768


def test_handshake_liveness():
    ctl = new_connection("controlling", 0)
    out = new_connection("controlled", 0)
    ctl, a1 = conn_step(ctl, Start(0))
    (f1,) = emitted(a1)
    out, a2 = conn_step(out, Rx(f1, 1))
    (f2,) = emitted(a2)
    ctl, _ = conn_step(ctl, Rx(f2, 2))
    assert ctl.started and out.started
