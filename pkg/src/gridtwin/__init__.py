"""gridtwin: a deterministic cyber-physical twin of an MV/LV smart grid.

The package co-simulates an AC power grid with an emulated SCADA network
(IEC 60870-5-104 between control centre and field RTU, Modbus TCP between
RTU and IEDs) and replays multi-stage cyberattacks against it.
"""
__version__ = "0.1.0"
