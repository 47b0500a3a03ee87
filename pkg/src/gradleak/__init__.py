"""Temporal gradient inversion attacks on federated learning, with robust aggregation."""
from .attack import AttackConfig, ReconstructionResult, align_gradients, dlg_attack, recover_labels, tgias_ro
from .autodiff import GradientMatcher, gia_loss, grad_input, grad_params
from .errors import (AggregationError, AttackAborted, ConfigError, DimensionError, FormatError, GradLeakError,
                     NumericalOverflowError, ShapeError)
from .data_io import Dataset, synth_dataset
from .fl_sim import ClientData, FederationConfig, GradObservation, run_fedsgd
from .models import ModelSpec, init_params, parse_model
from .params import ParamSet
from .metrics import match_batch
from .robust import AggregatorKind, aggregate

__version__ = "0.1.0"
