"""Excursion-set digital twins for multiphase microstructures.

Simulate three-phase voxel microstructures as excursion sets of Gaussian and
chi-square random fields, calibrate them to segmented 2-d image data (by
two-point coverage descriptor matching, adversarial training, or both) and
validate 3-d realizations with geometric descriptors.
"""

from .model import (HIGH, LOW, ModelParams, PhaseField, PhaseImage, param_count,
                    realize_anisotropic, realize_hard, realize_soft)
from .random_fields import (KernelGrid, NoiseField, ParametricCovariance,
                            RadialKernelSpec, build_lowparam_kernel,
                            build_radial_kernel, covariance_of_kernel,
                            eval_parametric_covariance, kernel_from_covariance,
                            sample_white_noise, simulate_chi2_pair,
                            simulate_correlated_pair, simulate_grf)
from .calibration import (TrainConfig, train_combined, train_gan, train_tppf)
from .anisotropy import ScaleFit, fit_scale_factor

__version__ = "0.1.0"

__all__ = [
    "HIGH", "LOW", "ModelParams", "PhaseField", "PhaseImage", "param_count",
    "realize_anisotropic", "realize_hard", "realize_soft",
    "KernelGrid", "NoiseField", "ParametricCovariance", "RadialKernelSpec",
    "build_lowparam_kernel", "build_radial_kernel", "covariance_of_kernel",
    "eval_parametric_covariance", "kernel_from_covariance",
    "sample_white_noise", "simulate_chi2_pair", "simulate_correlated_pair",
    "simulate_grf",
    "TrainConfig", "train_combined", "train_gan", "train_tppf",
    "ScaleFit", "fit_scale_factor",
    "__version__",
]
