"""Reference MV/LV grid model and steady-state AC power flow."""
from .assets import (Measurement, MeasurementError, ProfileError, bus_injections, measure,
                     profile_value, sample_profiles, select_points, step_battery)
from .model import (LOAD_Q_RATIO, Asset, Battery, Bus, GridModel, GridModelError, GridParams, Line,
                    MeasurementPoint, Profile, Transformer, build_reference_grid, default_measurement_points,
                    feeder_roots)
from .solver import (BranchFlow, GridState, PowerFlowDiverged, PowerFlowError, SingularJacobian,
                     build_ybus, solve_power_flow)

__all__ = [
    "Asset", "Battery", "BranchFlow", "Bus", "GridModel", "GridModelError", "GridParams", "GridState",
    "LOAD_Q_RATIO", "Line", "Measurement", "MeasurementError", "MeasurementPoint", "PowerFlowDiverged",
    "PowerFlowError", "Profile", "ProfileError", "SingularJacobian", "Transformer", "build_reference_grid",
    "build_ybus", "bus_injections", "default_measurement_points", "feeder_roots", "measure",
    "profile_value", "sample_profiles", "select_points", "solve_power_flow", "step_battery",
]
