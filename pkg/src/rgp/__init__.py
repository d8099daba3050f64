"""Differentially private training of small neural networks via low-rank
gradient-carrier reparametrization, with baselines, a numeric Renyi
accountant, and an analysis suite.
"""

from .analysis import (LeastSquaresProblem, ls_gradient_subspace_check,
                       mi_attack, track_stable_rank)
from .carriers import (CarrierConfig, historical_update, power_decompose,
                       projection_residual, projection_residuals,
                       random_carriers, top_r_factors)
from .errors import CalibrationError, ConfigError, DataError
from .linalg import (gram_schmidt_columns, matmul, spectral_norm, stable_rank,
                     subspace_angle_sin, svd_oracle)
from .nn import (ConvLayer, FlattenLayer, GradStorageCounter, LinearLayer,
                 Network, ReluLayer, build_convnet, build_mlp,
                 mean_squared_error, softmax_cross_entropy)
from .optimizer import (HistoryState, MomentumSGD, dpsgd_step, layer_ranks,
                        nonprivate_step, reconstruct_update, rgp_step)
from .privacy import (DEFAULT_ORDERS, RdpAccountant, calibrate_sigma,
                      clip_per_sample, compose_epsilon, gaussian_perturb,
                      rdp_step)

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "CarrierConfig",
    "ConfigError",
    "ConvLayer",
    "DataError",
    "DEFAULT_ORDERS",
    "DPMLPClassifier",
    "FlattenLayer",
    "GradStorageCounter",
    "HistoryState",
    "LeastSquaresProblem",
    "LinearLayer",
    "MomentumSGD",
    "Network",
    "RdpAccountant",
    "ReluLayer",
    "build_convnet",
    "build_mlp",
    "calibrate_sigma",
    "clip_per_sample",
    "compose_epsilon",
    "dpsgd_step",
    "gaussian_perturb",
    "gram_schmidt_columns",
    "historical_update",
    "layer_ranks",
    "ls_gradient_subspace_check",
    "matmul",
    "mean_squared_error",
    "mi_attack",
    "nonprivate_step",
    "power_decompose",
    "projection_residual",
    "projection_residuals",
    "random_carriers",
    "rdp_step",
    "reconstruct_update",
    "rgp_step",
    "softmax_cross_entropy",
    "spectral_norm",
    "stable_rank",
    "subspace_angle_sin",
    "svd_oracle",
    "top_r_factors",
    "track_stable_rank",
]

from .estimator import DPMLPClassifier  # noqa: E402  (imports sklearn)
