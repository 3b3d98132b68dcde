from .config import RadioParams, SimConfig, SliceSpec, default_slices, dump_scenario, load_scenario
from .env import Packet, SimEnv, UeState, init_env, replay_counterfactual, step
from .feedback import FeedbackVector

__all__ = [
    "FeedbackVector", "Packet", "RadioParams", "SimConfig", "SimEnv", "SliceSpec", "UeState",
    "default_slices", "dump_scenario", "init_env", "load_scenario", "replay_counterfactual", "step",
]
