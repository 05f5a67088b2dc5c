"""Monte Carlo harness for comparing linear (M1) and nonlinear (M2) shrinkage weights.

Every random draw comes from a stream keyed by ``(seed, replicate, role)`` so a
replicate's result does not depend on how replicates are scheduled.
"""
from __future__ import annotations

import csv
import gzip
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import partial
from typing import Optional

import numpy as np

from .covariance import (
    DEFAULT_GAMMA_GRID,
    ControlEnsemble,
    CovarianceEstimate,
    linear_shrinkage,
    nonlinear_shrinkage,
    select_bandwidth,
)
from .errors import ExperimentUnstable, InvalidInput, NumericalError
from .inference import calibrate_ci, normal_ci
from .regression import FingerprintData, estimate_xi, gtls_fit

FORCINGS = ("ANT", "NAT")

# stream roles
ROLE_EPS, ROLE_NU, ROLE_CONTROL, ROLE_CV, ROLE_BOOT = 0, 1, 10, 11, 12


def stream(seed: int, replicate: int, role: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate), int(role)]))


@dataclass
class SigmaSpec:
    """Recipe for a true covariance on ``N = S*T`` coordinates (box-major layout).

    ``kind="ST"``: ``D^{1/2} (R_S kron R_T) D^{1/2}`` with AR(1) correlations.
    ``kind="UN"``: eigenvectors of a base ST-style matrix built from the
    ``base_*`` fields, eigenvalues averaged in ``S`` blocks of ``T`` and
    jittered by independent U[0.5, 1.5] factors.
    """

    kind: str = "ST"
    S: int = 25
    T: int = 11
    rho_s: float = 0.1
    rho_t: float = 0.1
    variances: Optional[list] = None
    seed: int = 2020
    base_rho_s: float = 0.95
    base_rho_t: float = 0.8
    base_log_var_range: float = 4.0
    average_blocks: bool = True
    jitter: bool = True
    jitter_seed: int = 2021

    def __post_init__(self):
        if self.kind not in ("ST", "UN"):
            raise InvalidInput(f"unknown sigma kind {self.kind!r}")
        if self.S < 1 or self.T < 1:
            raise InvalidInput("S and T must be positive")
        for rho in (self.rho_s, self.rho_t, self.base_rho_s, self.base_rho_t):
            if not -1 < rho < 1:
                raise InvalidInput(f"AR(1) coefficient {rho} outside (-1, 1)")
        if self.variances is not None:
            v = np.asarray(self.variances, dtype=float)
            if v.shape != (self.S * self.T,) or np.any(v <= 0):
                raise InvalidInput("variances must be S*T positive values")

    @property
    def N(self) -> int:
        return self.S * self.T


def ar1_correlation(size: int, rho: float) -> np.ndarray:
    idx = np.arange(size)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def _kronecker_ar1(S, T, rho_s, rho_t, variances) -> np.ndarray:
    if not (-1 < rho_s < 1 and -1 < rho_t < 1):
        raise InvalidInput("AR(1) coefficients must lie in (-1, 1)")
    R = np.kron(ar1_correlation(S, rho_s), ar1_correlation(T, rho_t))
    sd = np.sqrt(np.asarray(variances, dtype=float))
    return R * np.outer(sd, sd)


def make_sigma_st(spec: SigmaSpec) -> CovarianceEstimate:
    if spec.variances is not None:
        var = np.asarray(spec.variances, dtype=float)
    else:
        var = np.random.default_rng(spec.seed).uniform(0.5, 1.5, spec.N)
    return CovarianceEstimate.from_matrix(
        _kronecker_ar1(spec.S, spec.T, spec.rho_s, spec.rho_t, var), method="oracle"
    )


def make_sigma_un(spec: SigmaSpec) -> CovarianceEstimate:
    rng = np.random.default_rng(spec.seed)
    log_var = rng.uniform(-spec.base_log_var_range / 2, spec.base_log_var_range / 2, spec.N)
    base = _kronecker_ar1(spec.S, spec.T, spec.base_rho_s, spec.base_rho_t, np.exp(log_var))
    lam, G = np.linalg.eigh(base)
    if spec.average_blocks:
        lam = np.repeat(lam.reshape(spec.S, spec.T).mean(axis=1), spec.T)
    if spec.jitter:
        # jitter follows eigenvalue rank order
        lam = lam * np.random.default_rng(spec.jitter_seed).uniform(0.5, 1.5, spec.N)
    M = (G * lam) @ G.T
    return CovarianceEstimate.from_matrix(M, method="oracle")


def make_sigma(spec: SigmaSpec) -> CovarianceEstimate:
    return make_sigma_st(spec) if spec.kind == "ST" else make_sigma_un(spec)


def signal_patterns(S: int, T: int, kind: str = "default") -> np.ndarray:
    """Two synthetic fingerprints (columns ANT, NAT), each with squared norm ``N``.

    ANT is a smooth warming trend with a spatial amplitude gradient; NAT is a
    zero-mean oscillation in time. Coordinates are box-major.
    """
    if S < 1 or T < 2:
        raise InvalidInput("need S >= 1 and T >= 2")
    s = np.arange(S)[:, None]
    t = (np.arange(T)[None, :] + 1.0) / T
    if kind == "default":
        ant = (1.0 + 0.5 * np.sin(2 * np.pi * (s + 0.5) / S)) * t**2
        nat = (1.0 + 0.3 * np.cos(2 * np.pi * (s + 0.5) / S)) * np.sin(2 * np.pi * 2.3 * t + 0.4)
    elif kind == "linear":
        ant = (1.0 + 0.25 * s / S) * t
        nat = np.cos(np.pi * 3.0 * t) * np.ones_like(s)
    else:
        raise InvalidInput(f"unknown pattern kind {kind!r}")
    X = np.column_stack([ant.ravel(), nat.ravel()])
    N = S * T
    return X * np.sqrt(N / np.sum(X * X, axis=0))


@dataclass
class SimConfig:
    sigma: SigmaSpec = field(default_factory=SigmaSpec)
    signal_scale: float = 1.0
    beta: tuple = (1.0, 1.0)
    ensemble_sizes: tuple = (35, 46)
    n_control: int = 100
    replicates: int = 100
    methods: tuple = ("M1", "M2")
    ci_kinds: tuple = ("N", "CB")
    seed: int = 0
    level: float = 0.95
    bootstrap_reps: int = 200
    folds: int = 5
    gamma_grid: tuple = DEFAULT_GAMMA_GRID
    pattern_kind: str = "default"
    record_trace_xi: bool = True

    def __post_init__(self):
        if isinstance(self.sigma, dict):
            self.sigma = SigmaSpec(**self.sigma)
        self.beta = tuple(float(b) for b in self.beta)
        self.ensemble_sizes = tuple(int(n) for n in self.ensemble_sizes)
        self.methods = tuple(self.methods)
        self.ci_kinds = tuple(self.ci_kinds)
        self.gamma_grid = tuple(float(g) for g in self.gamma_grid)
        if self.replicates < 1:
            raise InvalidInput("replicates must be >= 1")
        if self.n_control < 2 or min(self.ensemble_sizes) < 1:
            raise InvalidInput("sizes must be positive (n_control >= 2)")
        if len(self.beta) != 2 or len(self.ensemble_sizes) != 2:
            raise InvalidInput("the design has two forcings")
        for m in self.methods:
            if m not in ("M1", "M2", "oracle"):
                raise InvalidInput(f"unknown method {m!r}")
        for k in self.ci_kinds:
            if k not in ("N", "CB"):
                raise InvalidInput(f"unknown CI kind {k!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInput(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma_grid"] = list(self.gamma_grid)
        return d


@dataclass
class Design:
    sigma: CovarianceEstimate
    root: np.ndarray  # root @ root.T == sigma
    X: np.ndarray  # true fingerprints (signal_scale applied)


def build_design(config: SimConfig) -> Design:
    sigma = make_sigma(config.sigma)
    d = sigma.decomposition
    root = d.eigenvectors * np.sqrt(d.eigenvalues)
    X = config.signal_scale * signal_patterns(config.sigma.S, config.sigma.T, config.pattern_kind)
    return Design(sigma, root, X)


def generate_replicate(config: SimConfig, index: int, design: Optional[Design] = None):
    """Draw ``(y, FingerprintData, ControlEnsemble)`` for one replicate."""
    design = design or build_design(config)
    N = design.X.shape[0]
    beta = np.asarray(config.beta)
    y = design.X @ beta + design.root @ stream(config.seed, index, ROLE_EPS).standard_normal(N)
    x_tilde = np.empty_like(design.X)
    for i, n_i in enumerate(config.ensemble_sizes):
        nu = design.root @ stream(config.seed, index, ROLE_NU + i).standard_normal(N)
        x_tilde[:, i] = design.X[:, i] + nu / np.sqrt(n_i)
    Z = stream(config.seed, index, ROLE_CONTROL).standard_normal((config.n_control, N)) @ design.root.T
    data = FingerprintData(y, x_tilde, np.asarray(config.ensemble_sizes))
    return y, data, ControlEnsemble(Z, centered=False)


def _oracle_estimator(sigma, ensemble):
    return sigma


def _estimate(method, config, design, ensemble, index):
    """Return ``(estimate, estimator used for bootstrap refits)``."""
    if method == "M1":
        return linear_shrinkage(ensemble), linear_shrinkage
    if method == "M2":
        gamma, _ = select_bandwidth(ensemble, config.folds, config.gamma_grid,
                                    seed=int(stream(config.seed, index, ROLE_CV).integers(2**31)))
        return nonlinear_shrinkage(ensemble, gamma), partial(nonlinear_shrinkage, gamma=gamma)
    return design.sigma, None


def run_replicate(config: SimConfig, index: int, design: Optional[Design] = None) -> list:
    """Fit every configured method on one replicate; one record per method."""
    design = design or build_design(config)
    _, data, ensemble = generate_replicate(config, index, design)
    beta_true = np.asarray(config.beta)
    scales = np.sqrt(np.asarray(config.ensemble_sizes, dtype=float))
    records = []
    for m_idx, method in enumerate(config.methods):
        rec = {"replicate": index, "method": method, "status": "ok", "gamma": np.nan, "kappa": np.nan,
               "trace_xi": np.nan}
        for f in FORCINGS:
            for key in ("beta", "N_lower", "N_upper", "CB_lower", "CB_upper"):
                rec[f"{f}_{key}"] = np.nan
        try:
            sigma_hat, estimator = _estimate(method, config, design, ensemble, index)
            if sigma_hat.gamma is not None:
                rec["gamma"] = sigma_hat.gamma
            fit = gtls_fit(data, sigma_hat)
            for i, f in enumerate(FORCINGS):
                rec[f"{f}_beta"] = fit.beta[i]
            if "N" in config.ci_kinds:
                ci = normal_ci(fit, config.level)
                for i, f in enumerate(FORCINGS):
                    rec[f"{f}_N_lower"], rec[f"{f}_N_upper"] = ci.lower[i], ci.upper[i]
            if "CB" in config.ci_kinds:
                boot_seed = int(stream(config.seed, index, ROLE_BOOT + m_idx).integers(2**31))
                ci, cal = calibrate_ci(data, sigma_hat, fit, config.level, config.bootstrap_reps,
                                       boot_seed, estimator, config.n_control)
                rec["kappa"] = cal.kappa
                for i, f in enumerate(FORCINGS):
                    rec[f"{f}_CB_lower"], rec[f"{f}_CB_upper"] = ci.lower[i], ci.upper[i]
            if config.record_trace_xi:
                xi = estimate_xi(beta_true / scales, design.X * scales, sigma_hat,
                                 sigma_ref=design.sigma, scales=scales)
                rec["trace_xi"] = float(np.trace(xi))
        except NumericalError as exc:
            rec["status"] = type(exc).__name__
        records.append(rec)
    return records


def _run_chunk(config, indices):
    design = build_design(config)
    return [run_replicate(config, i, design) for i in indices]


@dataclass
class ExperimentReport:
    config: SimConfig
    records: list  # per-replicate, per-method dicts
    summary: list  # one dict per method
    failures: dict
    wall_time: float = 0.0

    def row(self, method: str) -> dict:
        for r in self.summary:
            if r["method"] == method:
                return r
        raise KeyError(method)


def summarize(config: SimConfig, records: list) -> tuple:
    summary, failures = [], {}
    beta = np.asarray(config.beta)
    for method in config.methods:
        recs = [r for r in records if r["method"] == method]
        ok = [r for r in recs if r["status"] == "ok"]
        failures[method] = len(recs) - len(ok)
        row = {"size": config.n_control, "method": method, "n_ok": len(ok), "n_fail": failures[method]}
        for i, f in enumerate(FORCINGS):
            b = np.array([r[f"{f}_beta"] for r in ok])
            row[f"{f}_bias"] = float(np.mean(b) - beta[i]) if b.size else np.nan
            row[f"{f}_sd100"] = float(100 * np.std(b, ddof=1)) if b.size > 1 else np.nan
            for kind in ("N", "CB"):
                lo = np.array([r[f"{f}_{kind}_lower"] for r in ok])
                hi = np.array([r[f"{f}_{kind}_upper"] for r in ok])
                if kind in config.ci_kinds and lo.size:
                    row[f"{f}_{kind}_cil"] = float(np.mean(hi - lo))
                    row[f"{f}_{kind}_cr"] = float(100 * np.mean((lo <= beta[i]) & (beta[i] <= hi)))
                else:
                    row[f"{f}_{kind}_cil"] = np.nan
                    row[f"{f}_{kind}_cr"] = np.nan
        tr = np.array([r["trace_xi"] for r in ok])
        row["mean_trace_xi"] = float(np.mean(tr)) if tr.size else np.nan
        summary.append(row)
    return summary, failures


def run_experiment(config: SimConfig, threads: int = 1, allow_unstable: bool = False) -> ExperimentReport:
    """Run all replicates and aggregate bias, SD, CI length and coverage per method."""
    start = time.perf_counter()
    indices = list(range(config.replicates))
    if threads == 0:
        threads = os.cpu_count() or 1
    if threads <= 1:
        design = build_design(config)
        nested = [run_replicate(config, i, design) for i in indices]
    else:
        chunks = [indices[k::threads] for k in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_chunk, [config] * threads, chunks))
        by_index = {}
        for chunk, part in zip(chunks, parts):
            by_index.update(zip(chunk, part))
        nested = [by_index[i] for i in indices]
    records = [r for reps in nested for r in reps]
    summary, failures = summarize(config, records)
    report = ExperimentReport(config, records, summary, failures, time.perf_counter() - start)
    worst = max(failures.values(), default=0)
    if worst > 0.05 * config.replicates and not allow_unstable:
        raise ExperimentUnstable(f"{worst} of {config.replicates} replicates failed")
    return report


REPORT_COLUMNS = ["size", "method"] + [
    f"{f}_{k}" for f in FORCINGS
    for k in ("bias", "sd100", "N_cil", "N_cr", "CB_cil", "CB_cr")
] + ["n_ok", "n_fail", "mean_trace_xi"]


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "NA" if np.isnan(v) else repr(v)


def report_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in report.summary:
        w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def replicates_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(report.records[0]) if report.records else []
    w.writerow(cols)
    for r in report.records:
        w.writerow([_fmt(r[c]) for c in cols])
    return buf.getvalue()


def write_report(report: ExperimentReport, output_dir: str) -> list:
    """Write ``report.csv`` and ``replicates.csv.gz``; return the paths."""
    os.makedirs(output_dir, exist_ok=True)
    rpath = os.path.join(output_dir, "report.csv")
    with open(rpath, "w", newline="") as fh:
        fh.write(report_csv(report))
    gpath = os.path.join(output_dir, "replicates.csv.gz")
    with open(gpath, "wb") as raw:
        # fixed mtime and empty name keep the archive byte-stable
        with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz:
            gz.write(replicates_csv(report).encode())
    return [rpath, gpath]
