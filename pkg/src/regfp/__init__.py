"""Regularized fingerprinting for detection and attribution."""

from .covariance import (
    BandwidthCV,
    ControlEnsemble,
    CovarianceEstimate,
    SpectralDecomposition,
    hilbert_at_zero,
    hilbert_transform,
    kernel_density,
    linear_shrinkage,
    nonlinear_shrinkage,
    pava,
    pool_gridbox_variance,
    sample_covariance,
    select_bandwidth,
    unpool_covariance,
)
from .inference import CalibrationResult, ConfidenceInterval, calibrate_ci, normal_ci
from .losses import LossReport, loss_report, mv_loss
from .regression import (
    FingerprintData,
    ScalingFit,
    estimate_xi,
    gls_fit,
    gtls_fit,
    orthogonalize,
    prewhiten,
    score,
)

__version__ = "0.1.0"
