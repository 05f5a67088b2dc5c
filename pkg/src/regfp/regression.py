"""Scaling-factor estimation: GLS and prewhitened generalized total least squares."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .covariance import CovarianceEstimate
from .errors import (
    DegenerateTies,
    InvalidInput,
    NoFiniteSolution,
    SingularDesign,
)
from .losses import LossReport, loss_report  # noqa: F401  re-exported

GAP_TOL = 1e-10
G22_TOL = 1e-12

_PROVENANCE = {
    "linear_shrinkage": "M1",
    "nonlinear_shrinkage": "M2",
    "oracle": "oracle",
}


@dataclass
class FingerprintData:
    """Observations ``y`` (length N) and estimated fingerprints ``x_tilde`` (N x p)."""

    y: np.ndarray
    x_tilde: np.ndarray
    ensemble_sizes: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.x_tilde, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        sizes = np.asarray(self.ensemble_sizes, dtype=float).ravel()
        N, p = X.shape
        if y.size != N:
            raise InvalidInput(f"y has length {y.size}, fingerprints have {N} rows")
        if p < 1 or N <= p:
            raise InvalidInput(f"need p >= 1 and N > p, got N={N}, p={p}")
        if sizes.size != p or np.any(sizes < 1):
            raise InvalidInput("need one ensemble size >= 1 per fingerprint")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise InvalidInput("non-finite observations or fingerprints")
        self.y, self.x_tilde, self.ensemble_sizes = y, X, sizes

    @property
    def N(self) -> int:
        return self.x_tilde.shape[0]

    @property
    def p(self) -> int:
        return self.x_tilde.shape[1]


@dataclass
class ScalingFit:
    beta: np.ndarray
    xi: np.ndarray
    method: str  # "GLS" or "GTLS"
    weight: str  # "M1", "M2", "oracle" or "custom"
    n_obs: int
    prewhitener: Optional[CovarianceEstimate] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def covariance(self) -> np.ndarray:
        """Estimated covariance of ``beta``.

        For GTLS ``xi`` is the asymptotic covariance of ``sqrt(N)(beta - beta0)``;
        for GLS it already is ``Var(beta)``.
        """
        return self.xi / self.n_obs if self.method == "GTLS" else self.xi

    def as_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "xi": self.xi.tolist(),
            "method": self.method,
            "weight": self.weight,
            "n_obs": self.n_obs,
            "diagnostics": {k: float(v) for k, v in self.diagnostics.items()},
        }


def _provenance(estimate: CovarianceEstimate) -> str:
    return _PROVENANCE.get(estimate.method, "custom")


def _ref_matrix(sigma_ref) -> Optional[np.ndarray]:
    if sigma_ref is None:
        return None
    if isinstance(sigma_ref, CovarianceEstimate):
        return sigma_ref.matrix
    return np.asarray(sigma_ref, dtype=float)


def _check_rank(X: np.ndarray):
    s = np.linalg.svd(X, compute_uv=False)
    if s.size == 0 or s[-1] <= s[0] * max(X.shape) * np.finfo(float).eps:
        raise SingularDesign("design matrix is rank deficient")


def gls_fit(y, X, weight: CovarianceEstimate, sigma_ref=None) -> ScalingFit:
    """GLS with ``W = weight^{-1}``; ``xi`` is the sandwich variance under ``sigma_ref``."""
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    _check_rank(X)
    W = weight.inverse()
    WX = W @ X
    A = X.T @ WX
    Ai = np.linalg.inv(A)
    beta = Ai @ (WX.T @ y)
    R = _ref_matrix(sigma_ref)
    if R is None:
        xi = Ai
    else:
        xi = Ai @ (WX.T @ R @ WX) @ Ai
    xi = 0.5 * (xi + xi.T)
    return ScalingFit(beta, xi, "GLS", _provenance(weight), X.shape[0], weight)


def _whiten(sigma_hat: CovarianceEstimate, V: np.ndarray) -> np.ndarray:
    lam = sigma_hat._positive_eigenvalues()
    G = sigma_hat.decomposition.eigenvectors
    proj = G.T @ V
    return G @ (proj / np.sqrt(lam).reshape((-1,) + (1,) * (proj.ndim - 1)))


def prewhiten(data: FingerprintData, sigma_hat: CovarianceEstimate):
    """Return ``(y*, X*, scales)`` with ``X* = S^{-1/2} X diag(sqrt(n_i))``."""
    scales = np.sqrt(data.ensemble_sizes)
    ys = _whiten(sigma_hat, data.y)
    Xs = _whiten(sigma_hat, data.x_tilde * scales)
    return ys, Xs, scales


def score(beta, y_star, x_star) -> np.ndarray:
    """Estimating equation of the TLS objective; zero at the GTLS solution."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    X = np.asarray(x_star, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y_star, dtype=float).ravel()
    N = X.shape[0]
    r = y - X @ beta
    return X.T @ r / N + beta * (r @ r) / (N * (1.0 + beta @ beta))


def tls_objective(beta, y_star, x_star) -> float:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    X = np.asarray(x_star, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    r = np.asarray(y_star, dtype=float).ravel() - X @ beta
    return float(r @ r / (1.0 + beta @ beta))


def solve_tls(y_star, x_star):
    """Smallest right singular vector of ``[X*, y*]``.

    Returns ``(beta, eigenvalues of W = A^T A ascending)``.
    """
    X = np.asarray(x_star, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    A = np.column_stack([X, np.asarray(y_star, dtype=float).ravel()])
    p = X.shape[1]
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    d = s[::-1] ** 2
    g = Vt[-1]
    trace = float(np.sum(d))
    if d[1] - d[0] < GAP_TOL * trace / (p + 1):
        raise DegenerateTies("smallest eigenvalues of the augmented matrix are tied")
    if abs(g[p]) < G22_TOL * np.linalg.norm(g):
        raise NoFiniteSolution("TLS solution at infinity")
    return -g[:p] / g[p], d


def estimate_xi(beta, X_hat, sigma_hat: CovarianceEstimate, sigma_ref=None, scales=None) -> np.ndarray:
    """Plug-in asymptotic covariance of ``sqrt(N)(beta_hat - beta)`` for the scaled model.

    ``X_hat`` and ``beta`` are in the ``sqrt(n_i)``-scaled coordinates. With
    ``scales`` given, the result is mapped back by ``diag(scales)`` congruence.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    X = np.asarray(X_hat, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    N, p = X.shape
    lam = sigma_hat._positive_eigenvalues()
    G = sigma_hat.decomposition.eigenvectors
    GX = G.T @ X
    D1 = (GX.T / lam) @ GX / N
    try:
        D1i = np.linalg.inv(D1)
    except np.linalg.LinAlgError as exc:
        raise SingularDesign(str(exc)) from exc
    if np.linalg.cond(D1) > 1e14:
        raise SingularDesign("Delta_1 is numerically singular")
    R = _ref_matrix(sigma_ref)
    if R is None:
        D2, K = D1, 1.0
    else:
        # M = Gamma^T R Gamma expressed in the eigenbasis of sigma_hat
        M = G.T @ R @ G
        SiGX = GX / lam[:, None]
        D2 = SiGX.T @ M @ SiGX / N
        Mw = M / np.sqrt(np.outer(lam, lam))
        K = float(np.sum(Mw * Mw) / N)
    bb = float(beta @ beta)
    middle = D2 + K * np.linalg.inv(np.eye(p) + np.outer(beta, beta))
    xi = D1i @ middle @ D1i * (1.0 + bb)
    xi = 0.5 * (xi + xi.T)
    if scales is not None:
        s = np.asarray(scales, dtype=float)
        xi = xi * np.outer(s, s)
    return xi


def gtls_fit(data: FingerprintData, sigma_hat: CovarianceEstimate, sigma_ref=None) -> ScalingFit:
    """Prewhiten by ``sigma_hat`` then solve total least squares.

    ``beta`` and ``xi`` are reported in the original (unscaled) coordinates.
    """
    ys, Xs, scales = prewhiten(data, sigma_hat)
    b_scaled, d = solve_tls(ys, Xs)
    N = data.N
    s_res = float(np.linalg.norm(score(b_scaled, ys, Xs)))
    xi = estimate_xi(b_scaled, data.x_tilde * scales, sigma_hat, sigma_ref, scales=scales)
    diagnostics = {
        "objective": tls_objective(b_scaled, ys, Xs),
        "score_residual": s_res,
        "eigen_gap": float(d[1] - d[0]),
        "n_obs": N,
    }
    return ScalingFit(b_scaled * scales, xi, "GTLS", _provenance(sigma_hat), N, sigma_hat, diagnostics)


def orthogonalize(X):
    """``X = X* V^T`` with orthogonal ``V`` and mutually orthogonal columns of ``X*``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    _check_rank(X)
    _, _, Vt = np.linalg.svd(X, full_matrices=False)
    V = Vt.T
    return X @ V, V
