"""Closed-form and brute-force verifiers for Gaussian targets.

For a centered Gaussian every score is linear, so optimal localized scores,
localization errors and L2 distances between linear scores reduce to
moment computations: ``E||(a - b) x||^2 = (a - b) C (a - b)^T``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.linalg import solve

from .diffusion import TimeGrid, format_float, ou_moments
from .graph import UNREACHABLE
from .rng import stream


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested accuracy."""


def _window(window, d: int) -> np.ndarray:
    W = np.array(sorted(set(int(i) for i in window)), dtype=int)
    if W.size == 0 or W[0] < 0 or W[-1] >= d:
        raise ValueError(f"window {tuple(window)} is empty or out of range for d = {d}")
    return W


@dataclass(frozen=True)
class LinearLocalScore:
    """``u(x_W) = -coeff @ x_W`` for the coordinates ``window`` (sorted)."""

    window: tuple[int, ...]
    j: int
    coeff: np.ndarray

    def full_row(self, d: int) -> np.ndarray:
        """Coefficient embedded into a length-``d`` row (zeros off the window)."""
        row = np.zeros(d)
        row[list(self.window)] = self.coeff
        return row

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return -np.asarray(x)[..., list(self.window)] @ self.coeff


def _check_inputs(C, window, j):
    C = np.asarray(C, dtype=float)
    d = C.shape[0]
    W = _window(window, d)
    if j not in W:
        raise ValueError(f"component {j} is not in its window {tuple(W)}")
    return C, W


def optimal_localized_score_conditional(C, window, j: int) -> LinearLocalScore:
    """``E[-(P x)_j | x_W]`` through Gaussian conditioning.

    The coefficient is ``P[j, W] + P[j, W'] C[W', W] C[W, W]^{-1}`` with
    ``W'`` the complement of the window and ``P = C^{-1}``.
    """
    C, W = _check_inputs(C, window, j)
    d = C.shape[0]
    P = np.linalg.inv(C)
    Wc = np.setdiff1d(np.arange(d), W)
    coeff = P[j, W].copy()
    if Wc.size:
        # C[W', W] C[W, W]^{-1} = (C[W, W]^{-1} C[W, W'])^T
        K = solve(C[np.ix_(W, W)], C[np.ix_(W, Wc)], assume_a="pos")
        coeff += P[j, Wc] @ K.T
    return LinearLocalScore(tuple(int(i) for i in W), int(j), coeff)


def optimal_localized_score_marginal(C, window, j: int) -> LinearLocalScore:
    """Score of the marginal on the window: row ``j`` of ``C[W, W]^{-1}``."""
    C, W = _check_inputs(C, window, j)
    CW_inv = np.linalg.inv(C[np.ix_(W, W)])
    k = int(np.flatnonzero(W == j)[0])
    return LinearLocalScore(tuple(int(i) for i in W), int(j), CW_inv[k].copy())


def linear_l2_sq(C, row_a, row_b) -> float:
    """``E||(row_a - row_b) x||^2`` for ``x ~ N(0, C)``."""
    diff = np.asarray(row_a, dtype=float) - np.asarray(row_b, dtype=float)
    return float(diff @ np.asarray(C) @ diff)


def localization_error_exact(C, window, j: int) -> float:
    """``E||u_j^*(x_W) - s_j(x)||^2`` in closed form."""
    C = np.asarray(C, dtype=float)
    u = optimal_localized_score_marginal(C, window, j)
    P = np.linalg.inv(C)
    return max(linear_l2_sq(C, u.full_row(C.shape[0]), P[j]), 0.0)


def pythagorean_check(C, window, j: int, trial_coeffs: Sequence) -> float:
    """Largest residual of ``E||u - s||^2 = E||u - u*||^2 + E||u* - s||^2`` over trials."""
    C = np.asarray(C, dtype=float)
    d = C.shape[0]
    u_star = optimal_localized_score_conditional(C, window, j)
    W = list(u_star.window)
    s_row = np.linalg.inv(C)[j]
    star_row = u_star.full_row(d)
    loc_err = linear_l2_sq(C, star_row, s_row)
    worst = 0.0
    for coeff in trial_coeffs:
        row = np.zeros(d)
        row[W] = coeff
        lhs = linear_l2_sq(C, row, s_row)
        rhs = linear_l2_sq(C, row, star_row) + loc_err
        worst = max(worst, abs(lhs - rhs))
    return worst


# ---------------------------------------------------------------- bounds


def _decay_power(base, graph_dist):
    dist = np.asarray(graph_dist)
    expo = np.where(dist == UNREACHABLE, np.inf, dist).astype(float)
    with np.errstate(invalid="ignore"):
        return np.where(expo == 0, 1.0, np.power(base, expo))


def locality_bound_rhs(m: float, M: float, t: float, graph_dist):
    """Approximate-locality bound on the Hessian entries of ``log p_t``.

    ``alpha^2 / (sigma^2 (m sigma^2 + alpha^2)) * (1 - (m sigma^2 + alpha^2)/(M sigma^2 + alpha^2))^dist``.
    ``graph_dist`` may be an array; unreachable pairs get bound 0.
    """
    if t <= 0:
        raise ValueError("bound requires t > 0")
    if not 0 < m <= M:
        raise ValueError(f"need 0 < m <= M, got m={m}, M={M}")
    alpha, sigma = ou_moments(t)
    a2, s2 = alpha**2, sigma**2
    lead = a2 / (s2 * (m * s2 + a2))
    base = 1.0 - (m * s2 + a2) / (M * s2 + a2)
    out = lead * _decay_power(max(base, 0.0), graph_dist)
    return float(out) if np.ndim(out) == 0 else out


def correlation_decay_bound(m: float, M: float, graph_dist):
    """``(1/m) (1 - m/M)^dist``; unreachable pairs get bound 0."""
    if not 0 < m <= M:
        raise ValueError(f"need 0 < m <= M, got m={m}, M={M}")
    out = _decay_power(max(1.0 - m / M, 0.0), graph_dist) / m
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class SlackReport:
    """Minimum of ``rhs - lhs`` over all checked entries."""

    min_slack: float
    worst_pair: tuple[int, int]
    lhs: float
    rhs: float
    n_violations: int

    @property
    def holds(self) -> bool:
        return self.n_violations == 0


def _slack_report(lhs: np.ndarray, rhs: np.ndarray, tol: float) -> SlackReport:
    slack = rhs - lhs
    k = int(np.argmin(slack))
    i, j = np.unravel_index(k, slack.shape)
    return SlackReport(
        min_slack=float(slack[i, j]),
        worst_pair=(int(i), int(j)),
        lhs=float(lhs[i, j]),
        rhs=float(rhs[i, j]),
        n_violations=int((slack < -tol).sum()),
    )


def correlation_decay_check(target, tol: float = 1e-10) -> SlackReport:
    """``|C_0(i, j)| <= (1/m)(1 - m/M)^{d_G(i, j)}`` at every pair."""
    lhs = np.abs(target.covariance)
    rhs = correlation_decay_bound(target.spectral_m, target.spectral_M, target.graph_distances())
    return _slack_report(lhs, rhs, tol)


@dataclass(frozen=True)
class IntegralBound:
    lhs: float
    rhs: float
    abs_err: float

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.slack >= -1e-10


def _lambda_integrand(lam, m, M, k):
    decay = (M - m) / (M + lam)
    return lam * (1.0 + lam) / (2.0 * (m + lam) ** 3) * decay ** (2 * k)


def integral_bound_check(m: float, M: float, k: int, rel_tail: float = 1e-12) -> IntegralBound:
    """Quadrature of the time integral of the squared Hessian-decay envelope.

    With ``lambda = alpha_t^2 / sigma_t^2`` the integrand over ``t in (0, inf)``
    becomes ``lambda (1 + lambda) / (2 (m + lambda)^3) ((M - m)/(M + lambda))^{2k}``
    on ``lambda in (0, inf)``, which is bounded.  The integral is taken on
    ``(0, Lambda]`` over log-spaced panels; ``Lambda`` is grown until the
    analytic tail bound ``(M - m)^{2k} Lambda^{-2k} / (2k)`` (valid for
    ``Lambda >= 1``) falls below ``rel_tail`` times the head.
    """
    if not 0 < m <= M:
        raise ValueError(f"need 0 < m <= M, got m={m}, M={M}")
    if k < 1:
        raise ValueError("k must be >= 1")
    kappa = M / m
    rhs = max(1.0, 1.0 / m) * math.log(kappa) * (1.0 - 1.0 / kappa) ** (2 * k)
    if M == m:
        return IntegralBound(0.0, rhs, 0.0)
    edges = [0.0, 1e-3] + [10.0**p for p in range(-2, 3)]
    head, err = 0.0, 0.0

    def add_panel(a, b):
        val, e, *rest = integrate.quad(
            _lambda_integrand, a, b, args=(m, M, k), epsabs=0.0, epsrel=1e-13, limit=200, full_output=1
        )
        if len(rest) > 1 and e > 1e-9 * max(abs(val), 1e-300):
            raise QuadratureError(f"quadrature on [{a}, {b}] did not converge: {rest[1]}")
        return val, e

    for a, b in zip(edges[:-1], edges[1:]):
        v, e = add_panel(a, b)
        head, err = head + v, err + e
    lam = edges[-1]
    tail = lambda L: (M - m) ** (2 * k) * L ** (-2.0 * k) / (2 * k)
    while tail(lam) > rel_tail * head:
        if lam > 1e300:
            raise QuadratureError("tail bound did not fall below tolerance")
        v, e = add_panel(lam, 10.0 * lam)
        head, err, lam = head + v, err + e, 10.0 * lam
    return IntegralBound(float(head), float(rhs), float(err + tail(lam)))


def integral_bound_t_form(m: float, M: float, k: int) -> float:
    """Same integral evaluated directly in ``t``; a cross-check for small ``k``."""

    def f(t):
        a2 = math.exp(-2 * t)
        s2 = -math.expm1(-2 * t)
        return a2 * a2 / (s2 * (m * s2 + a2) ** 3) * (1 - (m * s2 + a2) / (M * s2 + a2)) ** (2 * k)

    val, _ = integrate.quad(f, 0.0, np.inf, limit=400, epsabs=1e-14, epsrel=1e-11)
    return float(val)


# ------------------------------------------------------ DSM loss equivalence

TrialScore = Callable[[float], np.ndarray]


def _as_trial(u) -> TrialScore:
    if callable(u):
        return u
    coeff = np.asarray(u, dtype=float)
    return lambda t: coeff


def optimal_trial(target, window, j: int) -> TrialScore:
    """``t -> coefficient of u_j^*`` at time ``t`` for a Gaussian target."""
    return lambda t: optimal_localized_score_marginal(target.covariance_at(t), window, j).coeff


@dataclass
class DsmEquivalenceReport:
    """Monte Carlo DSM losses next to their closed-form counterparts.

    ``mc_loss[a]`` estimates the time-integrated DSM loss of trial ``a`` and
    ``l2_to_optimal[a]`` is the exact time-integrated ``E||u_a - u_j^*||^2``.
    ``pairs`` holds ``(a, b, mc_diff, closed_diff, se)`` for every ``a < b``,
    where ``se`` is the standard error of the paired difference.
    """

    mc_loss: np.ndarray
    mc_se: np.ndarray
    l2_to_optimal: np.ndarray
    pairs: list = field(default_factory=list)
    n_sigma: float = 3.0

    @property
    def differences_agree(self) -> bool:
        return all(abs(mc - cf) <= self.n_sigma * se for _, _, mc, cf, se in self.pairs)

    def minimizer_ok(self, optimal_index: int) -> bool:
        """Trial ``optimal_index`` has the smallest loss up to ``n_sigma`` paired errors."""
        for a, b, mc, _, se in self.pairs:
            if a == optimal_index and mc > self.n_sigma * se:
                return False
            if b == optimal_index and -mc > self.n_sigma * se:
                return False
        return True


def default_dsm_grid() -> TimeGrid:
    return TimeGrid.gauss_legendre(np.linspace(0.05, 2.0, 5), order=4)


def dsm_equivalence_check(
    target,
    window,
    j: int,
    trial_u_list: Sequence,
    time_grid: TimeGrid | None = None,
    n_mc: int = 100_000,
    seed: int = 0,
    n_sigma: float = 3.0,
    batch: int = 20_000,
) -> DsmEquivalenceReport:
    """Check that DSM-loss differences equal differences of L2 distances to ``u_j^*``.

    Every trial is a linear localized score ``u(x_W, t) = -a(t) @ x_W`` given
    by a coefficient vector or a callable ``t -> a(t)``.  Each Monte Carlo
    sample integrates over the time nodes with independent ``(x_0, eps)`` per
    node; all trials share the draws.
    """
    grid = time_grid or default_dsm_grid()
    if np.any(grid.times <= 0):
        raise ValueError("DSM loss needs t > 0 at every node")
    C0 = target.covariance
    d = C0.shape[0]
    W = _window(window, d)
    trials = [_as_trial(u) for u in trial_u_list]
    n_tr = len(trials)
    L = np.linalg.cholesky(C0)
    values = np.zeros((n_tr, n_mc))
    l2 = np.zeros(n_tr)
    for node, (t, w) in enumerate(zip(grid.times, grid.weights)):
        alpha, sigma = ou_moments(t)
        coeffs = np.array([tr(t) for tr in trials])  # n_tr x |W|
        C_t = target.covariance_at(t)
        star = optimal_localized_score_marginal(C_t, W, j).coeff
        CW = C_t[np.ix_(W, W)]
        for a in range(n_tr):
            diff = coeffs[a] - star
            l2[a] += w * float(diff @ CW @ diff)
        gen = stream(seed, "dsm", node)
        for start in range(0, n_mc, batch):
            n = min(batch, n_mc - start)
            x0 = gen.standard_normal((n, d)) @ L.T
            eps = gen.standard_normal((n, d))
            xt_W = alpha * x0[:, W] + sigma * eps[:, W]
            resid = -xt_W @ coeffs.T + eps[:, [j]] / sigma  # n x n_tr
            values[:, start : start + n] += w * (resid**2).T
    mc = values.mean(axis=1)
    se = values.std(axis=1, ddof=1) / math.sqrt(n_mc)
    pairs = []
    for a in range(n_tr):
        for b in range(a + 1, n_tr):
            dv = values[a] - values[b]
            pairs.append(
                (a, b, float(dv.mean()), float(l2[a] - l2[b]), float(dv.std(ddof=1) / math.sqrt(n_mc)))
            )
    return DsmEquivalenceReport(mc, se, l2, pairs, n_sigma)


# ------------------------------------------------ localization error profile


def localization_error_profile(target, radii: Sequence[int], time_grid: TimeGrid) -> np.ndarray:
    """Time-integrated localization error summed over components, per radius.

    Windows are the banded neighborhoods ``{i : |i - j| <= r}``.
    """
    d = target.dim
    out = np.zeros(len(radii))
    for t, w in zip(time_grid.times, time_grid.weights):
        C_t = target.covariance_at(t)
        P_t = np.linalg.inv(C_t)
        for k, r in enumerate(radii):
            total = 0.0
            for j in range(d):
                W = np.arange(max(0, j - r), min(d, j + r + 1))
                row = np.zeros(d)
                row[W] = np.linalg.solve(C_t[np.ix_(W, W)], np.eye(W.size)[j - W[0]])
                total += max(linear_l2_sq(C_t, row, P_t[j]), 0.0)
            out[k] += w * total
    return out


def loglinear_fit(x, y) -> tuple[float, float]:
    """Least-squares fit of ``log y`` against ``x``; returns ``(slope, R^2)``."""
    x = np.asarray(x, dtype=float)
    ly = np.log(np.asarray(y, dtype=float))
    slope, intercept = np.polyfit(x, ly, 1)
    resid = ly - (slope * x + intercept)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


# ------------------------------------------------------- verification report


@dataclass
class VerificationRow:
    name: str
    parameters: dict
    lhs: float
    rhs: float
    passed: bool

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs


def write_report_csv(rows: Sequence[VerificationRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "parameters", "lhs", "rhs", "slack", "pass"])
        for r in rows:
            w.writerow(
                [
                    r.name,
                    json.dumps(r.parameters, sort_keys=True),
                    format_float(r.lhs),
                    format_float(r.rhs),
                    format_float(r.slack),
                    "true" if r.passed else "false",
                ]
            )


def random_spd(d: int, rng: np.random.Generator, jitter: float = 0.1) -> np.ndarray:
    """Random symmetric positive-definite matrix ``A A^T / d + jitter I``."""
    A = rng.standard_normal((d, d))
    return A @ A.T / d + jitter * np.eye(d)


def _suite_locality(seed: int) -> list[VerificationRow]:
    from .gaussian import locality_bound_check, random_banded_precision
    from .graph import certify_locality, lattice_graph, path_graph, star_graph

    rows = []
    for name, g, S, nu in [
        ("path_locality", path_graph(30), 2.0, 1.0),
        ("lattice2_locality", lattice_graph((6, 6)), 9.0, 2.0),
        ("lattice3_locality", lattice_graph((4, 4, 4)), 27.0, 3.0),
    ]:
        cert = certify_locality(g, S, nu, r_max=6)
        rows.append(VerificationRow(name, {"S": S, "nu": nu, "r_max": 6}, cert.worst_ratio, 1.0, cert.holds))
    cert = certify_locality(star_graph(50), 1.0, 1.0, r_max=1)
    rows.append(
        VerificationRow("star_not_local", {"S": 1.0, "nu": 1.0, "r_max": 1}, 1.0, cert.worst_ratio, not cert.holds)
    )
    times = np.geomspace(0.01, 5.0, 10)
    for k, (d, r0) in enumerate([(60, 2), (80, 5), (120, 10)]):
        target = random_banded_precision(d, r0, 3.0, 0.5, stream(seed, "verify-locality", k))
        for t in times:
            e = locality_bound_check(target, float(t))
            rows.append(
                VerificationRow(
                    "hessian_decay_bound",
                    {"d": d, "r0": r0, "t": float(t), "pair": list(e.worst_pair)},
                    0.0,
                    e.min_slack,
                    e.n_violations == 0,
                )
            )
        rep = correlation_decay_check(target)
        rows.append(
            VerificationRow(
                "correlation_decay", {"d": d, "r0": r0, "pair": list(rep.worst_pair)}, rep.lhs, rep.rhs, rep.holds
            )
        )
    return rows


def _suite_oracles(seed: int) -> list[VerificationRow]:
    from .gaussian import discretized_ou_target

    rows = []
    gen = stream(seed, "verify-oracles")
    worst_rel, worst_pyth = 0.0, 0.0
    for _ in range(20):
        d = int(gen.integers(2, 13))
        C = random_spd(d, gen)
        j = int(gen.integers(d))
        size = int(gen.integers(1, min(5, d) + 1))
        others = gen.permutation(np.setdiff1d(np.arange(d), [j]))[: size - 1]
        W = sorted([j, *others.tolist()])
        a = optimal_localized_score_conditional(C, W, j).coeff
        b = optimal_localized_score_marginal(C, W, j).coeff
        worst_rel = max(worst_rel, float(np.abs(a - b).max() / np.abs(b).max()))
        trials = [gen.standard_normal(len(W)) for _ in range(5)] + [np.zeros(len(W))]
        worst_pyth = max(worst_pyth, pythagorean_check(C, W, j, trials))
    rows.append(VerificationRow("optimal_score_formulas", {"instances": 20}, worst_rel, 1e-8, worst_rel <= 1e-8))
    rows.append(VerificationRow("pythagorean_identity", {"instances": 20}, worst_pyth, 1e-8, worst_pyth <= 1e-8))
    for m in (0.5, 1.0, 2.0):
        for M in (2.0, 5.0, 10.0):
            if M < m:
                continue
            for k in (1, 3, 10):
                ib = integral_bound_check(m, M, k)
                rows.append(VerificationRow("integral_bound", {"m": m, "M": M, "k": k}, ib.lhs, ib.rhs, ib.holds))
    target = discretized_ou_target(8, 0.3)
    W, j = [2, 3, 4], 3
    rng = stream(seed, "verify-dsm-trials")
    trials = [optimal_trial(target, W, j), np.zeros(3)] + [0.5 * rng.standard_normal(3) for _ in range(2)]
    rep = dsm_equivalence_check(target, W, j, trials, n_mc=100_000, seed=seed)
    for a, b, mc, cf, se in rep.pairs:
        rows.append(
            VerificationRow(
                "dsm_difference", {"a": a, "b": b, "se": se}, abs(mc - cf), rep.n_sigma * se, abs(mc - cf) <= rep.n_sigma * se
            )
        )
    rows.append(VerificationRow("dsm_minimizer", {"trials": len(trials)}, 0.0, 0.0, rep.minimizer_ok(0)))
    return rows


SUITES = {"locality": _suite_locality, "oracles": _suite_oracles}


def run_verification(suite: str, seed: int = 0) -> list[VerificationRow]:
    """Run ``"locality"``, ``"oracles"`` or ``"all"``."""
    if suite == "all":
        return [row for name in SUITES for row in SUITES[name](seed)]
    if suite not in SUITES:
        raise ValueError(f"unknown verification suite {suite!r}; choose from locality, oracles, all")
    return SUITES[suite](seed)
