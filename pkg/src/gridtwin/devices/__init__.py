"""Device state machines: HMI/MTU, vRTU, IEDs and auxiliary services."""
from .datamap import (COMMON_ADDRESS, IOA_BSS_P, IOA_BSS_SETPOINT, IOA_BSS_SOC, IOA_LOAD_BASE, IOA_PV_BASE,
                      IOA_SUB_P, IOA_SUB_V, REG_P, REG_SETPOINT, REG_SOC, REG_V, UNIT_ID, IedSpec, ioa_roles,
                      reference_ieds)
from .ems import EmsParams, ems_compute_setpoint
from .eventlog import Event, EventLog, parse_line
from .ied import Ied
from .mtu import CommandHook, HookError, Mtu, MtuConfig
from .services import (DEFAULT_CREDENTIAL, DEFAULT_SERVICES, AuthResult, FileServer, ServiceSpec, blob_tag,
                       service_auth)
from .store import Datapoint, DatapointStore, StoreError
from .vrtu import Vrtu, VrtuConfig, budget_keep
