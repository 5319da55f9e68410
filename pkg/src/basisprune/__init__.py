"""Importance-guided pruning of singular-value bases in neural-network layers."""

from . import importance, model, numkit, oracles, persist, probe, spectra
from .importance import importance_score, run_compression, select_prune_set
from .model import BasisLinear, Batch, MlpModel, make_dataset, reparameterize
from .numkit import RngStream, rademacher, svd, sym_eig
from .probe import DiagEstimate, ProbeConfig, hessian_diag_probe, hutchinson_diag

__version__ = "0.1.0"
