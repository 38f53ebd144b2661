"""Separable multi-concept erasure on a toy text-conditioned diffusion model.

The package trains a small cross-attention denoiser on a labeled Gaussian
mixture, then removes chosen concepts from it by optimizing additive weight
increments confined to the null space of every other concept's token matrix.
Increments compose: applying a subset of them erases exactly that subset,
removing one restores its concept. See the README for the workflow.
"""

from .checkpoint import (
    CheckpointFormatError,
    load_arrays,
    load_increment,
    load_params,
    save_arrays,
    save_increment,
    save_params,
)
from .concept_repr import (
    corr_value,
    delta_eps,
    eta_weights,
    momentum_step,
    replay_momentum,
)
from .erasure_trainers import (
    BASELINE_KINDS,
    EraseHyper,
    EraseReport,
    train_baseline,
    train_gcirs,
    train_sepme,
    write_trace_csv,
)
from .eval_harness import (
    ToyClassifier,
    ablate_tau,
    evaluate,
    separability_suite,
    train_classifier,
)
from .numerics import NullSpaceEmpty, NumericalError
from .toy_diffusion import (
    DmHyper,
    ModelDims,
    build_concepts,
    make_default_dataset,
    make_schedule,
    train_dm,
)
from .weight_decoupling import (
    EraserSet,
    WeightIncrement,
    build_constraint,
    restoration_check,
)

__version__ = "0.1.0"

__all__ = [
    "BASELINE_KINDS",
    "CheckpointFormatError",
    "DmHyper",
    "EraseHyper",
    "EraseReport",
    "EraserSet",
    "ModelDims",
    "NullSpaceEmpty",
    "NumericalError",
    "ToyClassifier",
    "WeightIncrement",
    "ablate_tau",
    "build_concepts",
    "build_constraint",
    "corr_value",
    "delta_eps",
    "eta_weights",
    "evaluate",
    "load_arrays",
    "load_increment",
    "load_params",
    "make_default_dataset",
    "make_schedule",
    "momentum_step",
    "replay_momentum",
    "restoration_check",
    "save_arrays",
    "save_increment",
    "save_params",
    "separability_suite",
    "train_baseline",
    "train_classifier",
    "train_dm",
    "train_gcirs",
    "train_sepme",
    "write_trace_csv",
]
