"""IEC 60870-5-104 codec and link state machine (MTU <-> vRTU)."""
from .codec import *  # noqa: F401,F403
from .codec import Apdu, Asdu, InfoObject, UFunction, decode_apdu, encode_apdu, read_apdu, split_stream
from .conn import (Close, ConnParams, ConnState, Deliver, Emit, Log, Rx, Send, Start, Tick, conn_step,
                   new_connection)

IEC104_PORT = 2404
