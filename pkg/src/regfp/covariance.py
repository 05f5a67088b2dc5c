"""Covariance estimation from control-run replicates.

Sample covariance, Ledoit-Wolf linear shrinkage and the minimum-variance
nonlinear shrinkage estimator built on semicircle-kernel estimates of the
sample spectral density and its Hilbert transform.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    BandwidthTooLarge,
    DegenerateEnsemble,
    DegenerateGridbox,
    InsufficientReplicates,
    InvalidBandwidthExponent,
    InvalidEigenvalue,
    InvalidInput,
    LayoutMismatch,
    SingularWeight,
)

EPS = 2.2e-16
DEFAULT_GAMMA_GRID = tuple(np.linspace(0.22, 0.48, 8))
METHODS = ("sample", "linear_shrinkage", "nonlinear_shrinkage", "oracle")


@dataclass
class ControlEnsemble:
    """``n`` replicate vectors of dimension ``N`` stored row-wise."""

    replicates: np.ndarray
    centered: bool = False
    columns: Optional[np.ndarray] = None  # kept coordinate indices, if subset

    def __post_init__(self):
        Z = np.asarray(self.replicates, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if Z.ndim != 2 or Z.shape[1] < 1:
            raise InvalidInput(f"replicates must be a 2-d array, got shape {Z.shape}")
        if Z.shape[0] < 2:
            raise InsufficientReplicates(f"need at least 2 replicates, got {Z.shape[0]}")
        if not np.all(np.isfinite(Z)):
            raise InvalidInput("replicates contain non-finite entries")
        self.replicates = Z

    @property
    def n(self) -> int:
        return self.replicates.shape[0]

    @property
    def N(self) -> int:
        return self.replicates.shape[1]

    def centered_copy(self) -> "ControlEnsemble":
        if self.centered:
            return self
        Z = self.replicates - self.replicates.mean(axis=0)
        return ControlEnsemble(Z, centered=True, columns=self.columns)


@dataclass
class SpectralDecomposition:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # columns aligned with eigenvalues
    null_count: int = 0


@dataclass
class CovarianceEstimate:
    matrix: np.ndarray
    decomposition: SpectralDecomposition
    method: str = "sample"
    gamma: Optional[float] = None
    c_ratio: Optional[float] = None
    pooled: Optional[dict] = None
    params: dict = field(default_factory=dict)

    @classmethod
    def from_matrix(cls, matrix, method="oracle", **kwargs) -> "CovarianceEstimate":
        M = np.asarray(matrix, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise InvalidInput(f"covariance must be square, got shape {M.shape}")
        if not np.all(np.isfinite(M)):
            raise InvalidInput("covariance contains non-finite entries")
        M = 0.5 * (M + M.T)
        return cls(M, decompose(M), method=method, **kwargs)

    @property
    def N(self) -> int:
        return self.matrix.shape[0]

    def _positive_eigenvalues(self) -> np.ndarray:
        d = self.decomposition
        if d.null_count > 0 or np.any(d.eigenvalues <= 0):
            raise SingularWeight("covariance estimate is not strictly positive definite")
        return d.eigenvalues

    def power(self, exponent: float) -> np.ndarray:
        """Matrix power via the stored spectral decomposition."""
        lam = self._positive_eigenvalues()
        G = self.decomposition.eigenvectors
        return (G * lam**exponent) @ G.T

    def inverse(self) -> np.ndarray:
        return self.power(-1.0)

    def inv_sqrt(self) -> np.ndarray:
        return self.power(-0.5)

    def sqrt(self) -> np.ndarray:
        """A symmetric square root; allows null eigenvalues."""
        d = self.decomposition
        G = d.eigenvectors
        return (G * np.sqrt(np.clip(d.eigenvalues, 0.0, None))) @ G.T


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def decompose(matrix: np.ndarray) -> SpectralDecomposition:
    """Ascending eigendecomposition with sign-fixed eigenvectors.

    Eigenvalues at or below ``lambda_max * N * eps`` are counted as null;
    round-off negatives are clamped to zero.
    """
    lam, vec = np.linalg.eigh(matrix)
    lam = np.clip(lam, 0.0, None)
    vec = _fix_signs(vec)
    tau = lam[-1] * matrix.shape[0] * EPS
    null_count = int(np.count_nonzero(lam <= tau))
    return SpectralDecomposition(lam, vec, null_count)


def sample_covariance(ensemble: ControlEnsemble) -> CovarianceEstimate:
    """``n^{-1} sum_i Z_i Z_i^T`` after centering the columns if needed."""
    ens = ensemble.centered_copy()
    Z = ens.replicates
    S = Z.T @ Z / ens.n
    S = 0.5 * (S + S.T)
    return CovarianceEstimate(S, decompose(S), method="sample", c_ratio=ens.N / ens.n)


# -- linear shrinkage ---------------------------------------------------------

def linear_shrinkage_coefficients(ensemble: ControlEnsemble) -> dict:
    """Ledoit-Wolf (2004) coefficients toward the scaled identity.

    Returns the target ``mu`` (mean eigenvalue), the dispersion ``d2``, the
    estimation-noise term ``b2`` (already capped at ``d2``) and the
    shrinkage intensity ``b2 / d2``. Inner products use ``<A, B> = tr(AB^T)/N``.
    """
    ens = ensemble.centered_copy()
    Z = ens.replicates
    n, N = Z.shape
    S = Z.T @ Z / n
    mu = np.trace(S) / N
    s_norm2 = np.sum(S * S) / N
    d2 = s_norm2 - mu**2  # ||S - mu I||^2
    # sum_k ||z_k z_k^T - S||^2 = sum_k ||z_k||^4 - n ||S||^2
    row_sq = np.sum(Z * Z, axis=1)
    b2_bar = (np.sum(row_sq**2) / N - n * s_norm2) / n**2
    d2 = max(d2, 0.0)
    b2 = min(max(b2_bar, 0.0), d2)
    intensity = b2 / d2 if d2 > 0 else 0.0
    return {"mu": mu, "d2": d2, "b2": b2, "a2": d2 - b2, "intensity": intensity}


def linear_shrinkage(ensemble: ControlEnsemble) -> CovarianceEstimate:
    """Shrink toward ``mu I``: ``(b2/d2) mu I + (a2/d2) S``; trace preserving."""
    base = sample_covariance(ensemble)
    coef = linear_shrinkage_coefficients(ensemble)
    mu, rho = coef["mu"], coef["intensity"]
    if coef["d2"] <= 0 and mu <= 0:
        raise DegenerateEnsemble("all replicates identical: zero sample covariance")
    lam = (1.0 - rho) * base.decomposition.eigenvalues + rho * mu
    G = base.decomposition.eigenvectors
    M = (G * lam) @ G.T
    M = 0.5 * (M + M.T)
    return CovarianceEstimate(
        M,
        SpectralDecomposition(lam, G, 0),
        method="linear_shrinkage",
        c_ratio=base.c_ratio,
        params=coef,
    )


# -- kernel plug-ins ----------------------------------------------------------

def _check_kernel_args(eigenvalues, h, h_max=1.0):
    lam = np.asarray(eigenvalues, dtype=float).ravel()
    if lam.size == 0:
        raise InvalidInput("empty eigenvalue vector")
    if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
        raise InvalidEigenvalue("kernel estimates need strictly positive eigenvalues")
    if not 0 < h < h_max:
        if h >= h_max and h_max == 0.5:
            raise BandwidthTooLarge(f"bandwidth h={h:.4g} must be < 1/2")
        raise InvalidInput(f"bandwidth h={h!r} outside (0, {h_max})")
    return lam


def kernel_density(eigenvalues, h: float) -> np.ndarray:
    """Semicircle-kernel density estimate at each supplied eigenvalue.

    The kernel centred at ``lambda_j`` has half-width ``2 lambda_j h``.
    """
    lam = _check_kernel_args(eigenvalues, h)
    diff = lam[:, None] - lam[None, :]
    scale = lam[None, :] ** 2 * h**2
    terms = np.sqrt(np.clip(4.0 * scale - diff**2, 0.0, None)) / (2.0 * np.pi * scale)
    return terms.mean(axis=1)


def hilbert_transform(eigenvalues, h: float) -> np.ndarray:
    """Hilbert transform of :func:`kernel_density` at each eigenvalue."""
    lam = _check_kernel_args(eigenvalues, h)
    diff = lam[:, None] - lam[None, :]
    scale = lam[None, :] ** 2 * h**2
    root = np.sqrt(np.clip(diff**2 - 4.0 * scale, 0.0, None))
    terms = (np.sign(diff) * root - diff) / (2.0 * np.pi * scale)
    return terms.mean(axis=1)


def hilbert_at_zero(nonzero_eigenvalues, h: float, n: int) -> float:
    lam = _check_kernel_args(nonzero_eigenvalues, h, h_max=0.5)
    return float((1.0 - np.sqrt(1.0 - 4.0 * h**2)) / (2.0 * np.pi * n * h**2) * np.sum(1.0 / lam))


# -- isotonic regression ------------------------------------------------------

def pava(values) -> np.ndarray:
    """Least-squares nondecreasing fit with equal weights."""
    y = np.asarray(values, dtype=float).ravel()
    means: list[float] = []
    counts: list[int] = []
    for v in y:
        means.append(float(v))
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            c = counts[-2] + counts[-1]
            m = (means[-2] * counts[-2] + means[-1] * counts[-1]) / c
            means[-2:] = [m]
            counts[-2:] = [c]
    return np.repeat(means, counts)


# -- nonlinear shrinkage ------------------------------------------------------

def _check_gamma(gamma):
    if not 0.2 < gamma < 0.5:
        raise InvalidBandwidthExponent(f"gamma={gamma!r} outside (0.2, 0.5)")


def shrink_eigenvalues(eigenvalues, null_count: int, n: int, gamma: float) -> np.ndarray:
    """Minimum-variance shrinkage of ascending sample eigenvalues, PAVA-monotonized."""
    _check_gamma(gamma)
    lam = np.asarray(eigenvalues, dtype=float)
    N = lam.size
    if null_count == 0:
        h = n ** (-gamma)
        c = N / n
        f = kernel_density(lam, h)
        H = hilbert_transform(lam, h)
        delta = lam / ((np.pi * c * lam * f) ** 2 + (1.0 - c - np.pi * c * lam * H) ** 2)
    else:
        nz = lam[null_count:]
        m = nz.size
        if m == 0:
            raise DegenerateEnsemble("sample covariance is identically zero")
        h = m ** (-gamma)
        H0 = hilbert_at_zero(nz, h, m)
        f = kernel_density(nz, h)
        H = hilbert_transform(nz, h)
        delta0 = 1.0 / (np.pi * (null_count / m) * H0)
        delta_nz = nz / (np.pi**2 * nz**2 * (f**2 + H**2))
        delta = np.concatenate([np.full(null_count, delta0), delta_nz])
    return pava(delta)


def nonlinear_shrinkage(ensemble: ControlEnsemble, gamma: float) -> CovarianceEstimate:
    """Rotation-invariant minimum-variance estimate ``Gamma diag(delta) Gamma^T``."""
    _check_gamma(gamma)
    base = sample_covariance(ensemble)
    d = base.decomposition
    delta = shrink_eigenvalues(d.eigenvalues, d.null_count, ensemble.n, gamma)
    G = d.eigenvectors
    M = (G * delta) @ G.T
    M = 0.5 * (M + M.T)
    return CovarianceEstimate(
        M,
        SpectralDecomposition(delta, G, 0),
        method="nonlinear_shrinkage",
        gamma=float(gamma),
        c_ratio=base.c_ratio,
        params={"sample_null_count": d.null_count},
    )


# -- grid-box pooling ---------------------------------------------------------

def box_index(S: int, T: int, layout: str = "box-major") -> np.ndarray:
    """Grid-box label for each of the ``S*T`` coordinates."""
    if layout == "box-major":
        return np.repeat(np.arange(S), T)
    if layout == "time-major":
        return np.tile(np.arange(S), T)
    raise LayoutMismatch(f"unknown layout {layout!r}")


def pool_gridbox_variance(ensemble: ControlEnsemble, S: int, T: int, layout: str = "box-major"):
    """Standardize each coordinate; return the pooled per-box scale vector.

    Returns ``(rescaled_ensemble, scales)``. Back-transforming an estimate of
    the rescaled ensemble with :func:`unpool_covariance` gives a covariance
    whose variances are constant across the time steps of every grid box.
    """
    if S * T != ensemble.N:
        raise LayoutMismatch(f"N={ensemble.N} != S*T={S * T}")
    ens = ensemble.centered_copy()
    Z = ens.replicates
    var = np.mean(Z * Z, axis=0)
    boxes = box_index(S, T, layout)
    pooled = np.bincount(boxes, weights=var, minlength=S) / T
    if np.any(pooled <= 0) or np.any(var <= 0):
        raise DegenerateGridbox("grid box with zero variance")
    rescaled = ControlEnsemble(Z / np.sqrt(var), centered=True, columns=ens.columns)
    return rescaled, np.sqrt(pooled[boxes])


def unpool_covariance(estimate: CovarianceEstimate, scales, S: int, T: int,
                      layout: str = "box-major") -> CovarianceEstimate:
    s = np.asarray(scales, dtype=float)
    M = estimate.matrix * np.outer(s, s)
    out = CovarianceEstimate.from_matrix(
        M, method=estimate.method, gamma=estimate.gamma, c_ratio=estimate.c_ratio,
        params=dict(estimate.params),
    )
    out.pooled = {"S": S, "T": T, "layout": layout}
    return out


# -- bandwidth selection ------------------------------------------------------

@dataclass
class BandwidthCV:
    grid: np.ndarray
    scores: np.ndarray  # len(grid) x folds

    @property
    def mean_scores(self) -> np.ndarray:
        return self.scores.mean(axis=1)


def fold_indices(n: int, folds: int, seed: int) -> list:
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, folds)


def _spectral_mv_loss(delta: np.ndarray, q: np.ndarray) -> float:
    # delta: eigenvalues of the estimate; q: diag(Gamma^T S_ref Gamma)
    N = delta.size
    return float((np.sum(q / delta**2) / N) / (np.sum(1.0 / delta) / N) ** 2)


def select_bandwidth(ensemble: ControlEnsemble, folds: int = 5, grid=None, seed: int = 0):
    """K-fold choice of gamma minimizing the minimum-variance loss on held-out folds.

    Returns ``(gamma_star, BandwidthCV)``. Grid points whose bandwidth is too
    large for a training fold score ``inf``.
    """
    grid = np.asarray(DEFAULT_GAMMA_GRID if grid is None else grid, dtype=float).ravel()
    if grid.size == 0:
        raise InvalidInput("empty bandwidth grid")
    for g in grid:
        _check_gamma(g)
    n = ensemble.n
    if not 2 <= folds <= n:
        raise InvalidInput(f"need 2 <= folds <= n, got folds={folds}, n={n}")
    ens = ensemble.centered_copy()
    Z = ens.replicates
    scores = np.full((grid.size, folds), np.inf)
    for k, test_idx in enumerate(fold_indices(n, folds, seed)):
        train = np.delete(Z, test_idx, axis=0)
        base = sample_covariance(ControlEnsemble(train, centered=False))
        d = base.decomposition
        proj = Z[test_idx] @ d.eigenvectors
        q = np.mean(proj * proj, axis=0)
        for g, gamma in enumerate(grid):
            try:
                delta = shrink_eigenvalues(d.eigenvalues, d.null_count, train.shape[0], gamma)
            except (BandwidthTooLarge, DegenerateEnsemble):
                continue
            scores[g, k] = _spectral_mv_loss(delta, q)
    cv = BandwidthCV(grid, scores)
    mean = cv.mean_scores
    if not np.any(np.isfinite(mean)):
        raise BandwidthTooLarge("no grid value yields a valid bandwidth on every fold")
    return float(grid[int(np.argmin(mean))]), cv
