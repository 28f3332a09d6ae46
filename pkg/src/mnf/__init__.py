"""Variational Bayesian neural networks whose weight posteriors mix a
factorized Gaussian with flow-transformed multiplicative noise.

The package stacks, bottom up:

- ``autodiff``: a small reverse-mode tensor engine (float64 by default)
  with deterministic, replayable random streams;
- ``flows``: masked affine normalizing flows with exact log-determinants;
- ``layers``: stochastic dense/conv layers sampled via their induced
  pre-activation moments, plus factorized-Gaussian, additive log-uniform,
  dropout, and plain deterministic baselines;
- ``model``: layer descriptors, validation, initialization, and the
  replayable stochastic forward pass;
- ``elbo``: the training objective with its flow and auxiliary-density
  corrections, likelihoods, and regularizers;
- ``training``: bias-corrected Adam, the training loop, and score-function
  updates for learnable dropout rates;
- ``evaluation``: multi-sample prediction, entropy CDFs, gradient-sign
  attacks, rotation and regression-band sweeps, and the shuffled-label
  memorization protocol;
- ``data`` / ``checkpoint`` / ``config`` / ``cli``: IDX and synthetic
  datasets, the "mnf-v1" checkpoint container, experiment configs, and the
  command-line front end.
"""

from . import autodiff
from .autodiff import Rng, Tensor, backward, finite_diff_check
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, save_config, validate_config
from .data import (DatasetHandle, glyph_dataset, load_idx, make_toy_regression,
                   synthetic_digits, synthetic_letters, write_idx_images,
                   write_idx_labels)
from .elbo import (ElboBreakdown, elbo_minibatch, kl_conditional_gaussian,
                   kl_fflu, log_q_z, log_r)
from .errors import ConfigError, ContractError, FormatError, NumericFault
from .evaluation import (EntropyCdf, PredictiveSummary, adversarial_sweep,
                         entropy_cdf, fgsm, memorization_protocol, predict,
                         regression_bands, rotated_digit_sweep, sparsity)
from .flows import FlowStack, FlowStep, init_flow_stack, stack_forward
from .model import (LayerSpec, Model, ModelSpec, init_model, mlp_spec,
                    validate_spec)
from .training import Adam, TrainConfig, adam_step, reinforce_dropout_rate, train

__version__ = "0.1.0"

__all__ = [
    "Adam", "ConfigError", "ContractError", "DatasetHandle", "ElboBreakdown",
    "EntropyCdf", "ExperimentConfig", "FlowStack", "FlowStep", "FormatError",
    "LayerSpec", "Model", "ModelSpec", "NumericFault", "PredictiveSummary",
    "Rng", "Tensor", "TrainConfig", "adam_step", "adversarial_sweep",
    "autodiff", "backward", "elbo_minibatch", "entropy_cdf", "fgsm",
    "finite_diff_check", "glyph_dataset", "init_flow_stack", "init_model",
    "kl_conditional_gaussian", "kl_fflu", "load_checkpoint", "load_config",
    "load_idx", "log_q_z", "log_r", "make_toy_regression",
    "memorization_protocol", "mlp_spec", "predict", "regression_bands",
    "reinforce_dropout_rate", "rotated_digit_sweep", "save_checkpoint",
    "save_config", "sparsity", "stack_forward", "synthetic_digits",
    "synthetic_letters", "train", "validate_config", "validate_spec",
    "write_idx_images", "write_idx_labels",
]
