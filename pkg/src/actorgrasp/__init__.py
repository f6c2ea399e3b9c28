"""Conditional density actors, a CEM critic baseline and a planar grasping simulator.

Pure numpy: a small reverse-mode autodiff engine drives Gaussian mixtures,
Real NVP coupling flows and mixtures of flows; a cross-entropy-method
optimizer drives the critic baseline; toy benchmarks and a top-down
grasping simulator exercise both.
"""

from .autodiff import MLP, Adam, Tensor, no_grad
from .cem import CemConfig, CriticModel, cem_optimize, cem_until_success, critic_predict
from .density import GMM, BoxDensity, CouplingLayer, FlowModel, MofModel, build_model, load_model
from .seeding import derive_seed
from .training import (
    Episode, ReplayBuffer, TrainConfig, Transition, entropy_regularized_loss, nll_loss,
    off_policy_train, on_policy_train, relabel_episode,
)

__version__ = "0.1.0"

__all__ = [
    "MLP", "Adam", "Tensor", "no_grad",
    "CemConfig", "CriticModel", "cem_optimize", "cem_until_success", "critic_predict",
    "GMM", "BoxDensity", "CouplingLayer", "FlowModel", "MofModel", "build_model", "load_model",
    "derive_seed",
    "Episode", "ReplayBuffer", "TrainConfig", "Transition", "entropy_regularized_loss", "nll_loss",
    "off_policy_train", "on_policy_train", "relabel_episode",
]
