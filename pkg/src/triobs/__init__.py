"""Time-varying high-gain observers for triangular nonlinear systems."""

from .certify import verify
from .harness import ExperimentConfig, run_experiment
from .model import (GainDecay, GrowthEnvelope, TriangularSystem, eval_rhs,
                    get_system, make_example, normalize_increasing)
from .runtime import Trace, check_error_envelope, integrate_plant, run_observer
from .switching import SwitchingPolicy, load_plan, plan_switching, run_switching, save_plan
from .synthesis import ObserverGainSchedule, SynthesisConfig, load_schedule, save_schedule, synthesize

__all__ = [
    "GainDecay", "GrowthEnvelope", "TriangularSystem", "eval_rhs", "get_system",
    "make_example", "normalize_increasing", "ObserverGainSchedule", "SynthesisConfig",
    "synthesize", "load_schedule", "save_schedule", "verify", "Trace", "integrate_plant",
    "run_observer", "check_error_envelope", "SwitchingPolicy", "plan_switching",
    "run_switching", "save_plan", "load_plan", "ExperimentConfig", "run_experiment",
]
__version__ = "0.1.0"
