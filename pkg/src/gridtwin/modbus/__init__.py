"""Modbus TCP codec and register-map server (vRTU <-> IED)."""
from .codec import *  # noqa: F401,F403
from .server import RegisterMap, server_handle
