"""Exact machinery for centered Gaussian targets with banded precision.

For ``p_0 = N(0, C_0)`` the forward marginal is ``p_t = N(0, C_t)`` with
``C_t = alpha_t^2 C_0 + sigma_t^2 I``; the score is ``-P_t x`` with
``P_t = C_t^{-1}``.  Everything here is dense linear algebra.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .diffusion import (
    LinearScoreField,
    NoiseSchedule,
    SampleBatch,
    linear_beta_schedule,
    ou_moments,
    sample_reverse_coupled,
)
from .graph import UNREACHABLE
from .oracles import locality_bound_rhs
from .rng import stream


class SpectralFamily:
    """``t -> (alpha_t^2 C + sigma_t^2 I)^{-1}`` through one eigendecomposition of ``C``."""

    def __init__(self, covariance: np.ndarray):
        C = np.asarray(covariance, dtype=float)
        self.covariance = C
        self.eigvals, self.eigvecs = np.linalg.eigh(0.5 * (C + C.T))

    def precision_at(self, t: float) -> np.ndarray:
        alpha, sigma = ou_moments(t)
        denom = alpha**2 * self.eigvals + sigma**2
        if np.any(denom <= 0):
            raise np.linalg.LinAlgError(
                f"covariance at t={t} is singular (smallest eigenvalue {denom.min():.3e})"
            )
        V = self.eigvecs
        P = (V / denom) @ V.T
        return 0.5 * (P + P.T)


@dataclass
class GaussianTarget:
    """Centered Gaussian with a banded precision matrix.

    Attributes
    ----------
    precision : ndarray
        ``P_0`` (d x d, symmetric positive definite).
    bandwidth : int
        ``r0``; ``P_0(i, j) = 0`` for ``|i - j| > r0``.  0 means diagonal.
    spectral_m, spectral_M : float
        Extreme eigenvalues of ``P_0``.
    """

    precision: np.ndarray
    bandwidth: int
    spectral_m: float = field(init=False)
    spectral_M: float = field(init=False)
    _eigvals: np.ndarray = field(init=False, repr=False)
    _eigvecs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = np.asarray(self.precision, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("precision must be a square matrix")
        if not np.allclose(P, P.T, rtol=0, atol=1e-12 * max(1.0, np.abs(P).max())):
            raise ValueError("precision matrix is not symmetric")
        P = 0.5 * (P + P.T)
        d = P.shape[0]
        if not 0 <= self.bandwidth < max(d, 1):
            raise ValueError(f"bandwidth {self.bandwidth} invalid for d = {d}")
        i, j = np.indices(P.shape)
        if np.any(P[np.abs(i - j) > self.bandwidth] != 0):
            raise ValueError(f"precision has entries outside bandwidth {self.bandwidth}")
        lam, V = np.linalg.eigh(P)
        if lam[0] <= 0:
            raise ValueError("precision matrix is not positive definite")
        self.precision = P
        self._eigvals, self._eigvecs = lam, V
        self.spectral_m = float(lam[0])
        self.spectral_M = float(lam[-1])

    @property
    def dim(self) -> int:
        return int(self.precision.shape[0])

    @property
    def kappa(self) -> float:
        return self.spectral_M / self.spectral_m

    @property
    def covariance(self) -> np.ndarray:
        V = self._eigvecs
        C = (V / self._eigvals) @ V.T
        return 0.5 * (C + C.T)

    def precision_at(self, t: float) -> np.ndarray:
        alpha, sigma = ou_moments(t)
        lam, V = self._eigvals, self._eigvecs
        P = (V * (lam / (alpha**2 + sigma**2 * lam))) @ V.T
        return 0.5 * (P + P.T)

    def covariance_at(self, t: float) -> np.ndarray:
        alpha, sigma = ou_moments(t)
        return alpha**2 * self.covariance + sigma**2 * np.eye(self.dim)

    def score_field(self) -> LinearScoreField:
        return LinearScoreField(self.precision_at, self.dim)

    def graph_distances(self) -> np.ndarray:
        """``ceil(|i - j| / r0)``; pairs of a diagonal target are unreachable."""
        i, j = np.indices((self.dim, self.dim))
        gap = np.abs(i - j)
        if self.bandwidth == 0:
            return np.where(gap == 0, 0, UNREACHABLE)
        return -(-gap // self.bandwidth)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact draws ``x = L^{-T} z`` with ``P_0 = L L^T``."""
        L = np.linalg.cholesky(self.precision)
        z = rng.standard_normal((self.dim, n))
        return solve_triangular(L, z, lower=True, trans="T").T


def banded_factor_draws(d: int, r0: int, rng: np.random.Generator):
    """Standard normals behind a random banded factor.

    Returns ``(z, Z)`` with ``z`` of length ``d`` (diagonal) and ``Z`` of shape
    ``(d, r0)``; ``Z[i, k-1]`` feeds entry ``L[i, i-k]``.  Leading blocks of
    the draws for a large ``d`` are valid draws for any smaller ``d``.
    """
    z = rng.standard_normal(d)
    Z = rng.standard_normal((d, r0))
    return z, Z


def banded_factor(z, Z, diag_base: float, offdiag_scale: float) -> np.ndarray:
    d, r0 = Z.shape
    L = np.diag(diag_base + np.abs(z[:d]))
    for k in range(1, r0 + 1):
        L[np.arange(k, d), np.arange(0, d - k)] = offdiag_scale * Z[k:, k - 1]
    return L


def factor_kappa(L: np.ndarray) -> float:
    """Condition number of ``L L^T`` from the singular values of ``L``."""
    s = np.linalg.svd(L, compute_uv=False)
    return float((s[0] / s[-1]) ** 2)


def _validate_banded_args(d, r0, diag_base, offdiag_scale):
    if d < 2:
        raise ValueError("d must be >= 2")
    if not 1 <= r0 < d:
        raise ValueError(f"need 1 <= r0 < d, got r0={r0}, d={d}")
    if diag_base <= 0 or offdiag_scale < 0:
        raise ValueError("need diag_base > 0 and offdiag_scale >= 0")


def precision_from_factor(L: np.ndarray, r0: int) -> GaussianTarget:
    P = L @ L.T
    d = P.shape[0]
    i, j = np.indices(P.shape)
    P[np.abs(i - j) > r0] = 0.0
    return GaussianTarget(P, bandwidth=min(r0, d - 1))


def random_banded_precision(
    d: int, r0: int, diag_base: float, offdiag_scale: float, rng: np.random.Generator
) -> GaussianTarget:
    """``P_0 = L L^T`` for a random lower-triangular ``L`` of bandwidth ``r0``.

    ``L[i, i] = diag_base + |N(0,1)|`` and ``L[i, j] = offdiag_scale * N(0,1)``
    for ``0 < i - j <= r0``.
    """
    _validate_banded_args(d, r0, diag_base, offdiag_scale)
    z, Z = banded_factor_draws(d, r0, rng)
    return precision_from_factor(banded_factor(z, Z, diag_base, offdiag_scale), r0)


def random_banded_target(
    d: int,
    r0: int,
    diag_base: float,
    offdiag_scale: float,
    rng: np.random.Generator,
    kappa_range: tuple[float, float] | None = None,
    max_tries: int = 1000,
) -> GaussianTarget:
    """Random banded target, rejecting draws whose condition number is out of range."""
    for _ in range(max_tries):
        target = random_banded_precision(d, r0, diag_base, offdiag_scale, rng)
        if kappa_range is None or kappa_range[0] <= target.kappa <= kappa_range[1]:
            return target
    raise RuntimeError(f"no draw with kappa in {kappa_range} after {max_tries} tries")


def rescale_to_kappa(
    d: int,
    r0: int,
    diag_base: float,
    kappa: float,
    rng: np.random.Generator,
    scale_max: float = 4.0,
    iters: int = 60,
) -> tuple[GaussianTarget, float]:
    """Fix the normal draws and bisect ``offdiag_scale`` until ``kappa`` is hit.

    Returns the target and the scale found.  The achieved condition number is
    reported by the target; it matches ``kappa`` up to bisection resolution.
    """
    _validate_banded_args(d, r0, diag_base, 0.0)
    z, Z = banded_factor_draws(d, r0, rng)
    lo, hi = 0.0, scale_max
    if factor_kappa(banded_factor(z, Z, diag_base, 0.0)) > kappa:
        raise ValueError("requested kappa is below the diagonal-only condition number")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if factor_kappa(banded_factor(z, Z, diag_base, mid)) < kappa:
            lo = mid
        else:
            hi = mid
    return precision_from_factor(banded_factor(z, Z, diag_base, lo), r0), lo


def random_diagonal_target(d: int, diag_base: float, rng: np.random.Generator) -> GaussianTarget:
    """Diagonal ``P_0 = diag(diag_base + |N(0,1)|)^2``: an exactly local target."""
    if d < 1 or diag_base <= 0:
        raise ValueError("need d >= 1 and diag_base > 0")
    return GaussianTarget(np.diag((diag_base + np.abs(rng.standard_normal(d))) ** 2), bandwidth=0)


def scan_target(
    d: int,
    r0: int,
    diag_base: float,
    offdiag_scale: float,
    seed: int,
    kappa_center: float = 0.0,
    kappa_tol: float = 0.15,
    diagonal: bool = False,
    max_tries: int = 2000,
) -> GaussianTarget:
    """Random target drawn from stream ``(seed, "target", d, r0)``.

    With ``kappa_center > 0`` draws are rejected until
    ``|kappa - kappa_center| <= kappa_tol * kappa_center``.
    """
    rng = stream(seed, "target", d, r0)
    if diagonal:
        return random_diagonal_target(d, diag_base, rng)
    window = None
    if kappa_center > 0:
        window = ((1.0 - kappa_tol) * kappa_center, (1.0 + kappa_tol) * kappa_center)
    return random_banded_target(d, r0, diag_base, offdiag_scale, rng, window, max_tries)


def matched_kappa_targets(
    dims: Sequence[int],
    r0: int,
    diag_base: float,
    offdiag_scale: float,
    seed: int,
    kappa_center: float,
    kappa_tol: float = 0.15,
    max_tries: int = 2000,
) -> list[GaussianTarget]:
    """One independent random target per dimension, all with matched condition number."""
    return [
        scan_target(d, r0, diag_base, offdiag_scale, seed, kappa_center, kappa_tol, max_tries=max_tries)
        for d in dims
    ]


def discretized_ou_target(d: int, h: float) -> GaussianTarget:
    """Exact precision of the stationary AR(1) chain ``X_{n+1} = a X_n + s xi_n``.

    ``a = exp(-h)`` and ``s^2 = 1 - a^2``; the result is tridiagonal.
    """
    if d < 2 or h <= 0:
        raise ValueError("need d >= 2 and h > 0")
    a = math.exp(-h)
    s2 = -math.expm1(-2.0 * h)
    P = np.zeros((d, d))
    idx = np.arange(d)
    P[idx, idx] = (1.0 + a * a) / s2
    P[0, 0] = 1.0 + a * a / s2
    P[-1, -1] = 1.0 / s2
    P[idx[:-1], idx[1:]] = -a / s2
    P[idx[1:], idx[:-1]] = -a / s2
    return GaussianTarget(P, bandwidth=1)


def precision_at(target: GaussianTarget, t: float) -> np.ndarray:
    """``P_t = (alpha_t^2 C_0 + sigma_t^2 I)^{-1}``."""
    return target.precision_at(t)


def exact_score(target: GaussianTarget, x, t: float) -> np.ndarray:
    """``-P_t x`` for a single vector or a batch of row vectors."""
    x = np.asarray(x, dtype=float)
    return -(x @ target.precision_at(t))


def log_density(target: GaussianTarget, x, t: float) -> np.ndarray:
    """Log-density of ``p_t`` at ``x`` (vector or batch of rows)."""
    P = target.precision_at(t)
    x = np.asarray(x, dtype=float)
    _, logdet = np.linalg.slogdet(P)
    quad = np.einsum("...i,ij,...j->...", x, P, x)
    return -0.5 * quad + 0.5 * logdet - 0.5 * target.dim * math.log(2 * math.pi)


def effective_localization_radius(P: np.ndarray, eps: float = 1e-3) -> int:
    """Largest ``r`` whose mean ``|r-th off-diagonal|`` reaches ``eps * tr(P)/d``.

    Returns 0 when no off-diagonal qualifies.
    """
    P = np.asarray(P)
    d = P.shape[0]
    threshold = eps * np.trace(P) / d
    best = 0
    for r in range(1, d):
        if np.abs(np.diagonal(P, r)).mean() >= threshold:
            best = r
    return best


@dataclass
class LocalityBoundEntry:
    """Minimal slack of the approximate-locality bound at one time."""

    t: float
    min_slack: float
    worst_pair: tuple[int, int]
    n_violations: int


def locality_bound_check(
    target: GaussianTarget, t: float, tol: float = 1e-10
) -> LocalityBoundEntry:
    """Compare ``|grad^2_ij log p_t|`` against the approximate-locality bound.

    For a Gaussian, ``-grad^2 log p_t = P_t`` and the bounded quantity is the
    posterior-covariance part ``sigma_t^{-2} delta_ij - P_t(i, j)``; off the
    diagonal this is just ``-P_t(i, j)``.  Slack is ``rhs - lhs``; entries
    with slack below ``-tol`` count as violations.
    """
    if t <= 0:
        raise ValueError("locality bound needs t > 0")
    _, sigma = ou_moments(t)
    P = target.precision_at(t)
    lhs = np.abs(np.eye(target.dim) / sigma**2 - P)
    dist = target.graph_distances()
    rhs = locality_bound_rhs(target.spectral_m, target.spectral_M, t, dist)
    slack = rhs - lhs
    k = int(np.argmin(slack))
    i, j = divmod(k, target.dim)
    return LocalityBoundEntry(
        t=float(t),
        min_slack=float(slack[i, j]),
        worst_pair=(i, j),
        n_violations=int((slack < -tol).sum()),
    )


@dataclass
class LocalityScanReport:
    times: np.ndarray
    r_loc: np.ndarray
    bound_margin: np.ndarray

    @property
    def argmax_time(self) -> float:
        return float(self.times[int(np.argmax(self.r_loc))])


def locality_scan(
    target: GaussianTarget, times: Sequence[float], eps: float = 1e-3, check_bound: bool = True
) -> LocalityScanReport:
    times = np.asarray(times, dtype=float)
    r_loc = np.array([effective_localization_radius(target.precision_at(t), eps) for t in times])
    if check_bound:
        margin = np.array([locality_bound_check(target, t).min_slack for t in times])
    else:
        margin = np.full(times.shape, np.nan)
    return LocalityScanReport(times, r_loc, margin)


def sample_covariance(samples) -> np.ndarray:
    """Biased (``1/N``) covariance of mean-centered samples."""
    X = samples.data if isinstance(samples, SampleBatch) else np.asarray(samples, dtype=float)
    Xc = X - X.mean(axis=0)
    return Xc.T @ Xc / X.shape[0]


def empirical_precision(samples, t: float) -> np.ndarray:
    """``(alpha_t^2 C_hat + sigma_t^2 I)^{-1}`` with ``C_hat`` the biased sample covariance."""
    C = sample_covariance(samples)
    alpha, sigma = ou_moments(t)
    M = alpha**2 * C + sigma**2 * np.eye(C.shape[0])
    if sigma == 0 and np.linalg.matrix_rank(C) < C.shape[0]:
        raise np.linalg.LinAlgError("sample covariance is singular at t = 0")
    return np.linalg.inv(M)


def localize_matrix(P: np.ndarray, r: int) -> np.ndarray:
    """Zero every entry with ``|i - j| > r``."""
    if r < 0:
        raise ValueError("radius must be non-negative")
    P = np.asarray(P)
    i, j = np.indices(P.shape)
    return np.where(np.abs(i - j) <= r, P, 0.0)


def covariance_rel_error(C_hat: np.ndarray, C: np.ndarray) -> float:
    """``||C_hat - C||_2 / ||C||_2`` in the spectral norm."""
    return float(np.linalg.norm(C_hat - C, 2) / np.linalg.norm(C, 2))


def _band_mask(d: int, r: int) -> np.ndarray:
    i, j = np.indices((d, d))
    return np.abs(i - j) <= r


class LocalizedPrecisionField(LinearScoreField):
    """Score ``-P^{loc,r}_t x`` where ``P_t`` comes from a covariance estimate."""

    def __init__(self, family: SpectralFamily, radius: int | None):
        d = family.covariance.shape[0]
        self.family = family
        self.radius = radius
        self._mask = None if radius is None or radius >= d - 1 else _band_mask(d, radius)
        super().__init__(self._matrix, d)

    def _matrix(self, t: float) -> np.ndarray:
        P = self.family.precision_at(t)
        return P if self._mask is None else np.where(self._mask, P, 0.0)


def terminal_covariance(field: LinearScoreField, schedule: NoiseSchedule) -> np.ndarray:
    """Exact covariance of the reverse-EM output for a linear score field.

    Propagates ``S <- A S A^T + 2 dt I`` with ``A = (1 + dt) I - 2 dt P(T - t_n)``
    from ``S = I``.
    """
    d = field.dim
    S = np.eye(d)
    I = np.eye(d)
    for dt, t in zip(schedule.reverse_dts, schedule.score_times):
        A = (1.0 + dt) * I - 2.0 * dt * field.matrix_at(t)
        S = A @ S @ A.T + 2.0 * dt * I
    return 0.5 * (S + S.T)


@dataclass
class TradeoffConfig:
    d: int = 101
    h: float = 0.2
    N: int = 1000
    N_gen: int = 10_000
    n_steps: int = 1000
    beta_1: float = 1e-4
    beta_N: float = 0.05
    radii: tuple[int, ...] = (2, 4, 6, 8, 10, 12, 16, 20, 25, 35, 50, 75, 100)
    reps: int = 30
    seed: int = 0
    eps_rloc: float = 1e-3
    method: str = "sde"
    heatmap_radii: tuple[int, ...] = (4, 12, 35)
    exact_covariance: bool = False
    chunk_size: int = 4096

    def schedule(self) -> NoiseSchedule:
        return linear_beta_schedule(self.n_steps, self.beta_1, self.beta_N)


@dataclass
class TradeoffResult:
    radii: np.ndarray
    errors: np.ndarray  # reps x radii
    ref_errors: np.ndarray  # reps
    entrywise: dict = field(default_factory=dict)  # radius (or "ref") -> |C_hat - C| / ||C||_2, rep 0

    @property
    def mean(self) -> np.ndarray:
        return self.errors.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.errors.std(axis=0, ddof=1) if self.errors.shape[0] > 1 else np.zeros(len(self.radii))

    @property
    def ref_mean(self) -> float:
        return float(self.ref_errors.mean())

    @property
    def ref_std(self) -> float:
        return float(self.ref_errors.std(ddof=1)) if self.ref_errors.size > 1 else 0.0

    def at(self, r: int) -> tuple[float, float]:
        k = int(np.flatnonzero(self.radii == r)[0])
        return float(self.mean[k]), float(self.std[k])


def _tradeoff_rep(cfg: TradeoffConfig, rep: int):
    target = discretized_ou_target(cfg.d, cfg.h)
    C = target.covariance
    schedule = cfg.schedule()
    if cfg.exact_covariance:
        C_hat0 = C
    else:
        X = target.sample(cfg.N, stream(cfg.seed, "data", rep))
        C_hat0 = sample_covariance(X)
    family = SpectralFamily(C_hat0)
    fields = [LocalizedPrecisionField(family, r) for r in cfg.radii]
    fields.append(LocalizedPrecisionField(family, None))
    if cfg.method == "sde":
        batches = sample_reverse_coupled(
            fields, schedule, cfg.N_gen, seed=(cfg.seed, rep), chunk_size=cfg.chunk_size
        )
        covs = [sample_covariance(b) for b in batches]
    elif cfg.method == "moment":
        gen = stream(cfg.seed, "moment", rep)
        z = gen.standard_normal((cfg.N_gen, cfg.d))
        covs = []
        for f in fields:
            S = terminal_covariance(f, schedule)
            w, V = np.linalg.eigh(S)
            covs.append(sample_covariance(z @ (V * np.sqrt(np.clip(w, 0, None))).T))
    else:
        raise ValueError(f"unknown tradeoff method {cfg.method!r}")
    norm_C = np.linalg.norm(C, 2)
    errs = [covariance_rel_error(Ch, C) for Ch in covs]
    entry = {}
    if rep == 0:
        for r in cfg.heatmap_radii:
            if r in cfg.radii:
                entry[int(r)] = np.abs(covs[list(cfg.radii).index(r)] - C) / norm_C
        entry["ref"] = np.abs(covs[-1] - C) / norm_C
    return errs[:-1], errs[-1], entry


def tradeoff_experiment(cfg: TradeoffConfig, workers: int = 1) -> TradeoffResult:
    """Localization/statistical tradeoff on the discretized OU target.

    Each repetition draws ``N`` data samples, forms ``P_hat_t`` from their
    sample covariance, and runs the banded-localized reverse sampler for
    every radius plus the non-localized reference.  Within a repetition all
    samplers share initial states and noise.
    """
    run = partial(_tradeoff_rep, cfg)
    if workers > 1 and cfg.reps > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(cfg.reps)))
    else:
        results = [run(k) for k in range(cfg.reps)]
    errors = np.array([r[0] for r in results])
    ref = np.array([r[1] for r in results])
    return TradeoffResult(np.array(cfg.radii), errors, ref, results[0][2])
