"""Light-decoder neural solvers for the capacitated vehicle routing problem.

A numpy-only implementation of POMO-style attention models and the ReLD
decoder refinements, with REINFORCE training, multi-trajectory inference and
an exact dynamic-programming oracle for small instances.
"""

from .errors import (
    CheckpointError,
    ChecksumError,
    ConfigurationError,
    FeasibilityError,
    InfeasibleError,
    MagicError,
    NumericError,
    ParseError,
    ReldError,
    ShapeError,
    SizeError,
)
from .evaluation import (
    EvalReport,
    ablation_suite,
    ablation_table,
    brute_force_solve,
    evaluate,
    exact_solve,
    extension_probe,
    oracle_costs,
)
from .generate import FixedCapacity, GenConfig, TriangularRoute, keyed_rng, sample_instance, sample_instances
from .io import (
    ExperimentConfig,
    load_checkpoint,
    parse_cvrplib,
    read_config,
    read_cvrplib,
    read_instances,
    save_checkpoint,
    scale_instance,
    write_config,
    write_instances,
)
from .model import ModelConfig, ParamStore, decode_step, encode, init_params, preset
from .rollout import augment8, best_of, rollout, rollout_batch, solve
from .training import AdamState, TrainConfig, fine_tune, reinforce_loss, resume, train
from .vrp import Instance, RolloutState, Trajectory, feasible_mask, tour_cost, validate_solution

__version__ = "0.1.0"

__all__ = [
    "ablation_suite",
    "ablation_table",
    "AdamState",
    "augment8",
    "best_of",
    "brute_force_solve",
    "CheckpointError",
    "ChecksumError",
    "ConfigurationError",
    "decode_step",
    "encode",
    "EvalReport",
    "evaluate",
    "exact_solve",
    "ExperimentConfig",
    "extension_probe",
    "FeasibilityError",
    "feasible_mask",
    "fine_tune",
    "FixedCapacity",
    "GenConfig",
    "InfeasibleError",
    "init_params",
    "Instance",
    "keyed_rng",
    "load_checkpoint",
    "MagicError",
    "ModelConfig",
    "NumericError",
    "oracle_costs",
    "ParamStore",
    "parse_cvrplib",
    "ParseError",
    "preset",
    "read_config",
    "read_cvrplib",
    "read_instances",
    "reinforce_loss",
    "ReldError",
    "resume",
    "rollout",
    "rollout_batch",
    "RolloutState",
    "sample_instance",
    "sample_instances",
    "save_checkpoint",
    "scale_instance",
    "ShapeError",
    "SizeError",
    "solve",
    "tour_cost",
    "train",
    "TrainConfig",
    "Trajectory",
    "TriangularRoute",
    "validate_solution",
    "write_config",
    "write_instances",
]
