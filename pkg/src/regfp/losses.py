"""Loss functions comparing a covariance estimate with a reference covariance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import CovarianceEstimate
from .errors import InvalidInput, SingularDesign, SingularWeight


def _as_matrix(sigma) -> np.ndarray:
    if isinstance(sigma, CovarianceEstimate):
        return sigma.matrix
    return np.asarray(sigma, dtype=float)


def _inverse(sigma) -> np.ndarray:
    if isinstance(sigma, CovarianceEstimate):
        return sigma.inverse()
    M = np.asarray(sigma, dtype=float)
    try:
        return np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise SingularWeight(str(exc)) from exc


def _design_blocks(sigma_est, sigma_true, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    Si = _inverse(sigma_est)
    S = _as_matrix(sigma_true)
    SiX = Si @ X
    A = X.T @ SiX
    B = SiX.T @ S @ SiX
    if np.linalg.matrix_rank(A) < X.shape[1]:
        raise SingularDesign("X^T W X is singular")
    return X, A, B


def l1_loss(sigma_est, sigma_true, X) -> float:
    """Sum of GLS scaling-factor variances under weight ``sigma_est^{-1}``."""
    _, A, B = _design_blocks(sigma_est, sigma_true, X)
    Ai = np.linalg.inv(A)
    return float(np.trace(Ai @ B @ Ai))


def l2_loss(sigma_est, sigma_true, X) -> float:
    """Generalized variance, normalized by ``(tr(X^T X)/(pN))^p``."""
    X, A, B = _design_blocks(sigma_est, sigma_true, X)
    N, p = X.shape
    scale = (np.trace(X.T @ X) / (p * N)) ** p
    return float(scale * np.linalg.det(B / N) / np.linalg.det(A / N) ** 2)


def mv_loss(sigma_est, sigma_true) -> float:
    """``[tr(S^-1 Sigma S^-1)/N] / [tr(S^-1)/N]^2``."""
    Si = _inverse(sigma_est)
    S = _as_matrix(sigma_true)
    N = Si.shape[0]
    return float((np.sum((Si @ S) * Si.T) / N) / (np.trace(Si) / N) ** 2)


def frobenius_loss(sigma_est, sigma_true) -> float:
    return float(np.linalg.norm(_as_matrix(sigma_est) - _as_matrix(sigma_true), "fro"))


def stein_loss(sigma_est, sigma_true) -> float:
    """``tr(S Sigma^-1) - log det(S Sigma^-1) - N``."""
    S = _as_matrix(sigma_est)
    Ti = _inverse(sigma_true)
    P = S @ Ti
    sign, logdet = np.linalg.slogdet(P)
    if sign <= 0:
        raise SingularWeight("estimate times inverse reference is not positive definite")
    # clamp round-off below zero; the loss is nonnegative
    return max(float(np.trace(P) - logdet - S.shape[0]), 0.0)


@dataclass
class LossReport:
    l1: float
    l2: float
    l_mv: float
    frobenius: float
    stein: float

    def as_dict(self) -> dict:
        return {"l1": self.l1, "l2": self.l2, "l_mv": self.l_mv,
                "frobenius": self.frobenius, "stein": self.stein}


def loss_report(sigma_est, sigma_true, X) -> LossReport:
    S = _as_matrix(sigma_true)
    if S.shape[0] != S.shape[1] or not np.allclose(S, S.T, rtol=1e-10, atol=0):
        raise InvalidInput("reference covariance must be square and symmetric")
    return LossReport(
        l1=l1_loss(sigma_est, S, X),
        l2=l2_loss(sigma_est, S, X),
        l_mv=mv_loss(sigma_est, S),
        frobenius=frobenius_loss(sigma_est, S),
        stein=stein_loss(sigma_est, S),
    )
