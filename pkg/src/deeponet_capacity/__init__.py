"""Capacity measures, Rademacher bounds and training for DeepONets."""

from .linalg import ConvergenceError, frobenius_norm, row_norms, spectral_norm
from .network import (
    Activation,
    DeepONetModel,
    Mlp,
    forward_deeponet,
    forward_mlp,
    init_deeponet,
    load_checkpoint,
    relu_to_abs,
    save_checkpoint,
    symmetrize_depth,
)
from .capacity import CapacityReport, DataBounds, OperatorBound, composite_measure, gen_bound, rademacher_bound

__version__ = "0.1.0"
