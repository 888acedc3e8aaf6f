"""Two-layer control of heavy-duty vehicle platoons: speed-profile planning and safe MPC tracking."""
from .vehicle import VehicleParams, VehicleState
from .road import RoadProfile, load_road, synth_flat, synth_hill, synth_random_hilly
from .coordinator import DpConfig, SpeedProfile, plan_clac, plan_lac
from .mpc import MpcConfig

__version__ = "0.1.0"

__all__ = ["VehicleParams", "VehicleState", "RoadProfile", "load_road", "synth_flat", "synth_hill",
           "synth_random_hilly", "DpConfig", "SpeedProfile", "plan_clac", "plan_lac", "MpcConfig"]
