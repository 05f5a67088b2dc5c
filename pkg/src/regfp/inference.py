"""Confidence intervals for scaling factors.

Normal-theory intervals from the plug-in asymptotic covariance, and a
parametric-bootstrap calibration that widens them by a factor ``kappa``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import norm

from .covariance import CovarianceEstimate, ControlEnsemble
from .errors import CalibrationFailed, InvalidFit, InvalidInput, NumericalError
from .regression import FingerprintData, ScalingFit, gtls_fit

KAPPA_MAX = 5.0
KAPPA_TOL = 0.01
COVERAGE_TOL = 0.005


@dataclass
class ConfidenceInterval:
    lower: np.ndarray
    upper: np.ndarray
    level: float
    kind: str = "normal"  # or "calibrated"
    kappa: float = 1.0

    @property
    def length(self) -> np.ndarray:
        return self.upper - self.lower

    def covers(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        return (self.lower <= beta) & (beta <= self.upper)


@dataclass
class CalibrationResult:
    kappa: float
    coverage_trace: list = field(default_factory=list)  # (kappa, min coverage over coordinates)
    bootstrap_reps: int = 0
    seed: int = 0
    coverage: float = float("nan")
    failures: int = 0


def _check_level(level):
    if not 0 < level < 1:
        raise InvalidInput(f"level must lie in (0, 1), got {level!r}")


def _half_width(fit: ScalingFit, level: float) -> np.ndarray:
    cov = fit.covariance
    if not np.all(np.isfinite(cov)):
        raise InvalidFit("non-finite asymptotic covariance")
    z = norm.ppf(0.5 * (1.0 + level))
    return z * np.sqrt(np.clip(np.diag(cov), 0.0, None))


def normal_ci(fit: ScalingFit, level: float = 0.95) -> ConfidenceInterval:
    """``beta_i +/- z sqrt(xi_ii / N)``."""
    _check_level(level)
    hw = _half_width(fit, level)
    return ConfidenceInterval(fit.beta - hw, fit.beta + hw, level, "normal", 1.0)


def bootstrap_stream(seed: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate), 7]))


def _bootstrap_draws(data, sigma_hat, beta, B, seed, estimator, n_control, level):
    lam = np.clip(sigma_hat.decomposition.eigenvalues, 0.0, None)
    root = sigma_hat.decomposition.eigenvectors * np.sqrt(lam)  # root @ root.T = sigma_hat
    X = data.x_tilde
    N, p = X.shape
    mean_y = X @ beta
    inv_sqrt_n = 1.0 / np.sqrt(data.ensemble_sizes)
    err = np.full((B, p), np.nan)
    hw = np.full((B, p), np.nan)
    for b in range(B):
        rng = bootstrap_stream(seed, b)
        noise = root @ rng.standard_normal((N, p + 1))
        y_b = mean_y + noise[:, 0]
        x_b = X + noise[:, 1:] * inv_sqrt_n
        if estimator is not None:
            Z = rng.standard_normal((n_control, N)) @ root.T
            sigma_b = estimator(ControlEnsemble(Z, centered=False))
        else:
            sigma_b = sigma_hat
        try:
            fit_b = gtls_fit(FingerprintData(y_b, x_b, data.ensemble_sizes), sigma_b)
            hw_b = _half_width(fit_b, level)
        except NumericalError:
            continue
        err[b] = np.abs(fit_b.beta - beta)
        hw[b] = hw_b
    return err, hw


def calibrate_ci(
    data: FingerprintData,
    sigma_hat: CovarianceEstimate,
    fit: ScalingFit,
    level: float = 0.95,
    B: int = 1000,
    seed: int = 0,
    estimator: Optional[Callable[[ControlEnsemble], CovarianceEstimate]] = None,
    n_control: Optional[int] = None,
):
    """Parametric-bootstrap calibration of the normal interval.

    Simulates ``B`` datasets from the fitted model (``beta_hat``, ``x_tilde``
    as truth, ``sigma_hat`` as the noise covariance), refits each with the same
    pipeline and finds by bisection on ``[1, 5]`` the smallest ``kappa`` whose
    widened intervals cover ``beta_hat`` at the nominal level for every
    coordinate. When ``estimator`` is given, each bootstrap replicate also
    draws ``n_control`` control runs and re-estimates the covariance with it.
    """
    _check_level(level)
    if B < 200:
        raise InvalidInput(f"need B >= 200 bootstrap replicates, got {B}")
    if estimator is not None and (n_control is None or n_control < 2):
        raise InvalidInput("re-estimating the covariance needs n_control >= 2")
    err, hw = _bootstrap_draws(data, sigma_hat, fit.beta, B, seed, estimator, n_control, level)
    ok = np.all(np.isfinite(err), axis=1)
    failures = int(B - ok.sum())
    if not ok.any():
        raise CalibrationFailed("every bootstrap refit failed")
    err, hw = err[ok], hw[ok]

    def coverage(kappa):
        return float(np.min(np.mean(err <= kappa * hw, axis=0)))

    target = level - COVERAGE_TOL
    trace = []
    lo, hi = 1.0, KAPPA_MAX
    c_lo = coverage(lo)
    trace.append((lo, c_lo))
    if c_lo >= target:
        kappa = lo
    else:
        c_hi = coverage(hi)
        trace.append((hi, c_hi))
        if c_hi < target:
            raise CalibrationFailed(
                f"coverage {c_hi:.3f} at kappa={KAPPA_MAX} below {target:.3f}", trace
            )
        while hi - lo > KAPPA_TOL:
            mid = 0.5 * (lo + hi)
            c_mid = coverage(mid)
            trace.append((mid, c_mid))
            if c_mid >= target:
                hi = mid
            else:
                lo = mid
        kappa = hi
    hw0 = _half_width(fit, level)
    ci = ConfidenceInterval(fit.beta - kappa * hw0, fit.beta + kappa * hw0, level, "calibrated", kappa)
    result = CalibrationResult(kappa, sorted(trace), B, seed, coverage(kappa), failures)
    return ci, result
