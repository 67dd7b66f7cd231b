import struct

from hypothesis import strategies as st

from gridtwin.iec104.codec import (C_IC_NA_1, C_SC_NA_1, C_SE_NC_1, M_ME_NC_1, M_SP_NA_1, Apdu, Asdu, InfoObject,
                                   UFunction)
from gridtwin.modbus.codec import ModbusAdu

f32 = st.floats(width=32, allow_nan=False, allow_infinity=False)
seq = st.integers(0, 32767)


def _element(type_id):
    if type_id == M_SP_NA_1:
        return st.tuples(st.booleans(), st.integers(0, 15).map(lambda q: q << 4))
    if type_id in (M_ME_NC_1, C_SE_NC_1):
        return st.tuples(f32, st.integers(0, 255))
    if type_id == C_SC_NA_1:
        return st.tuples(st.booleans(), st.integers(0, 127).map(lambda q: q << 1))
    return st.tuples(st.integers(0, 255), st.just(0))


@st.composite
def asdus(draw):
    type_id = draw(st.sampled_from([M_SP_NA_1, M_ME_NC_1, C_SC_NA_1, C_SE_NC_1, C_IC_NA_1]))
    sq = draw(st.booleans())
    # 5-byte elements: 6 + 3 + 5n <= 249 with SQ, 6 + 8n without
    limit = 40 if sq else 30
    n = draw(st.integers(1, limit))
    elems = draw(st.lists(_element(type_id), min_size=n, max_size=n))
    if sq:
        base = draw(st.integers(0, 0xFFFFFF - n))
        ioas = [base + k for k in range(n)]
    else:
        ioas = draw(st.lists(st.integers(0, 0xFFFFFF), min_size=n, max_size=n))
    return Asdu(type_id, draw(st.integers(0, 63)), draw(st.integers(0, 65535)),
                tuple(InfoObject(i, v, q) for i, (v, q) in zip(ioas, elems)),
                originator=draw(st.integers(0, 255)), negative=draw(st.booleans()), test=draw(st.booleans()), sq=sq)


apdus = st.one_of(
    st.builds(lambda s, r, a: Apdu("I", s, r, asdu=a), seq, seq, asdus()),
    st.builds(lambda r: Apdu("S", recv_seq=r), seq),
    st.builds(lambda f: Apdu("U", u_function=f), st.sampled_from(list(UFunction))),
)


@st.composite
def modbus_adus(draw):
    tid = draw(st.integers(0, 65535))
    uid = draw(st.integers(0, 255))
    kind = draw(st.sampled_from(["rd_req", "rd_rsp", "ws", "wm_req", "wm_rsp", "exc"]))
    if kind == "rd_req":
        fc, data = 3, struct.pack(">HH", draw(st.integers(0, 65535)), draw(st.integers(1, 125)))
    elif kind == "rd_rsp":
        regs = draw(st.lists(st.integers(0, 65535), min_size=1, max_size=125))
        fc, data = 3, bytes([2 * len(regs)]) + struct.pack(f">{len(regs)}H", *regs)
    elif kind == "ws":
        fc, data = 6, struct.pack(">HH", draw(st.integers(0, 65535)), draw(st.integers(0, 65535)))
    elif kind == "wm_req":
        regs = draw(st.lists(st.integers(0, 65535), min_size=1, max_size=123))
        fc = 16
        data = struct.pack(">HHB", draw(st.integers(0, 65535)), len(regs), 2 * len(regs)) + struct.pack(
            f">{len(regs)}H", *regs)
    elif kind == "wm_rsp":
        fc, data = 16, struct.pack(">HH", draw(st.integers(0, 65535)), draw(st.integers(1, 123)))
    else:
        fc = draw(st.sampled_from([3, 6, 16])) | 0x80
        data = bytes([draw(st.integers(1, 4))])
    return ModbusAdu(tid, uid, fc, data)
