"""Variational deformable image registration by variable splitting.

The package couples a closed-form intensity-consistency update with
pluggable denoisers, runs it coarse to fine, and ships a small unrolled
network whose denoisers and penalty weights are trained end to end.
"""
from .errors import ConfigError, FormatError, GridMismatchError, NumericalError, VarRegError
from .grid import GridDesc, Pyramid, ScalarField, VectorField, build_pyramid
from .sampler import image_gradient, warp_adjoint, warp_mask_nearest, warp_scalar
from .icl import icl_l1, icl_l2, linearize, splitting_energy
from .denoise import ConvDenoiserWeights, DenoiserSpec, denoise, tv_denoise
from .solver import InitStrategy, SolverConfig, register
from .metrics import MetricsReport, dice, evaluate, hausdorff, jacobian_report
from .synth import PairConfig, make_dataset, make_pair
from .unroll import CascadeParams, TrainConfig, grad_check, train, vrnet_backward, vrnet_forward

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "FormatError", "GridMismatchError", "NumericalError", "VarRegError",
    "GridDesc", "Pyramid", "ScalarField", "VectorField", "build_pyramid",
    "image_gradient", "warp_adjoint", "warp_mask_nearest", "warp_scalar",
    "icl_l1", "icl_l2", "linearize", "splitting_energy",
    "ConvDenoiserWeights", "DenoiserSpec", "denoise", "tv_denoise",
    "InitStrategy", "SolverConfig", "register",
    "MetricsReport", "dice", "evaluate", "hausdorff", "jacobian_report",
    "PairConfig", "make_dataset", "make_pair",
    "CascadeParams", "TrainConfig", "grad_check", "train", "vrnet_backward", "vrnet_forward",
]
