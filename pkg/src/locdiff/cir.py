"""Cox-Ingersoll-Ross series: simulation, exact law, localized score model, evaluation.

The process is ``dX = 2a (b - X) dt + sigma sqrt(X) dW``.  A generative model
for whole series uses one weight-shared network that scores each coordinate
from its reflect-padded window of ``2r + 1`` neighbors.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .diffusion import NoiseSchedule, TimeGrid, linear_beta_schedule, ou_moments, sample_reverse
from .mlp import MlpScoreNet, load_model, save_model
from .rng import stream
from .scorematch import TrainConfig, fit_dsm, net_to_score


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CirParams:
    a: float = 1.136
    b: float = 1.1
    sigma: float = 0.4205
    h: float = 0.01
    dt: float = 1.0
    N: int = 50
    M: int = 50

    def __post_init__(self):
        if min(self.a, self.b, self.h, self.dt) <= 0 or self.sigma < 0:
            raise ValueError("need a, b, h, dt > 0 and sigma >= 0")
        if self.N < 1 or self.M < 1:
            raise ValueError("N and M must be >= 1")
        ratio = self.dt / self.h
        if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
            raise ValueError(f"record interval {self.dt} is not a positive multiple of the step {self.h}")

    @property
    def steps_per_record(self) -> int:
        return int(round(self.dt / self.h))

    @property
    def feller(self) -> bool:
        """``4ab >= sigma^2``: the origin is unattainable."""
        return 4 * self.a * self.b >= self.sigma**2

    @property
    def stationary_mean(self) -> float:
        return self.b

    @property
    def stationary_var(self) -> float:
        return self.sigma**2 * self.b / (4 * self.a)


@dataclass(frozen=True)
class CirExactLaw:
    """Law of ``X(t)`` given ``X(0) = x0``: ``X(t) / c(t)`` is noncentral chi-squared."""

    dof: float
    c: float
    noncentrality: float

    @property
    def mean(self) -> float:
        return self.c * (self.dof + self.noncentrality)

    @property
    def var(self) -> float:
        return self.c**2 * (2 * self.dof + 4 * self.noncentrality)


def cir_dof(p: CirParams) -> float:
    """Degrees of freedom ``8ab / sigma^2``; infinite when ``sigma = 0``."""
    return math.inf if p.sigma == 0 else 8 * p.a * p.b / p.sigma**2


def cir_c(p: CirParams, t: float) -> float:
    """``c(t) = sigma^2 / (8a) (1 - exp(-2at))``; ``t = inf`` gives the stationary scale."""
    if math.isinf(t):
        return p.sigma**2 / (8 * p.a)
    return p.sigma**2 / (8 * p.a) * -math.expm1(-2 * p.a * t)


def cir_exact_law(p: CirParams, t: float, x0: float) -> CirExactLaw:
    if t <= 0:
        raise ValueError("exact law needs t > 0")
    c = cir_c(p, t)
    if c == 0:
        raise ValueError("the exact law is degenerate when sigma = 0")
    lam = 0.0 if math.isinf(t) else math.exp(-2 * p.a * t) * x0 / c
    return CirExactLaw(cir_dof(p), c, lam)


def stationary_law(p: CirParams) -> CirExactLaw:
    return CirExactLaw(cir_dof(p), cir_c(p, math.inf), 0.0)


def _initial_state(p: CirParams, gen: np.random.Generator) -> float:
    """Stationary draw; the noiseless process starts at its fixed point ``b``."""
    if p.sigma == 0:
        return p.b
    law = stationary_law(p)
    return law.c * gen.chisquare(law.dof)


def _simulate_one(p: CirParams, seed: int, m: int) -> np.ndarray:
    gen = stream(seed, "cir-sim", m)
    x = _initial_state(p, gen)
    k = p.steps_per_record
    xi = gen.standard_normal(p.N * k)
    sqrt_h = math.sqrt(p.h)
    out = np.empty(p.N)
    for n in range(p.N):
        for s in range(k):
            x = x + 2 * p.a * (p.b - x) * p.h + p.sigma * math.sqrt(max(x, 0.0)) * sqrt_h * xi[n * k + s]
        if not math.isfinite(x):
            raise SimulationError(f"trajectory {m} became non-finite at record {n}")
        out[n] = x
    return out


def simulate_cir(p: CirParams, seed: int, workers: int = 1) -> np.ndarray:
    """Euler-Maruyama trajectories started from the stationary law; ``M x N`` records.

    The diffusion term uses ``sqrt(max(X, 0))``.  Trajectory ``m`` draws from
    stream ``(seed, "cir-sim", m)``; ``X(0)`` itself is not recorded.
    """
    k = p.steps_per_record
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(partial(_simulate_one, p, seed), range(p.M)))
        return np.array(rows)
    # vectorized across trajectories; each row keeps its own stream
    gens = [stream(seed, "cir-sim", m) for m in range(p.M)]
    x = np.array([_initial_state(p, g) for g in gens])
    xi = np.array([g.standard_normal(p.N * k) for g in gens])
    sqrt_h = math.sqrt(p.h)
    out = np.empty((p.M, p.N))
    for n in range(p.N):
        for s in range(k):
            x = x + 2 * p.a * (p.b - x) * p.h + p.sigma * np.sqrt(np.maximum(x, 0.0)) * sqrt_h * xi[:, n * k + s]
        if not np.isfinite(x).all():
            raise SimulationError(f"non-finite state at record {n}")
        out[:, n] = x
    return out


def reflect_indices(N: int, r: int) -> np.ndarray:
    """``(N, 2r + 1)`` index matrix of reflect-padded windows (0-based).

    Entry ``(i, r + m)`` is ``i + m`` when inside ``[0, N)`` and ``i - m`` otherwise.
    """
    if r < 0:
        raise ValueError("radius must be non-negative")
    i = np.arange(N)[:, None]
    m = np.arange(-r, r + 1)[None, :]
    idx = np.where((i + m >= 0) & (i + m < N), i + m, i - m)
    if np.any((idx < 0) | (idx >= N)):
        raise ValueError(f"radius {r} is too large to reflect inside a series of length {N}")
    return idx


def reflect_pad_window(x, i: int, r: int) -> np.ndarray:
    """Window ``x[i-r .. i+r]`` with out-of-range entries reflected around ``i``."""
    x = np.asarray(x)
    if not 0 <= i < x.shape[-1]:
        raise IndexError(f"position {i} outside series of length {x.shape[-1]}")
    return x[..., reflect_indices(x.shape[-1], r)[i]]


def cir_schedule(T: float = 0.05, beta_0: float = 1e-4, beta_T: float = 0.5, step: float = 0.001) -> NoiseSchedule:
    """One beta per node of the diffusion-time grid ``0, step, ..., T``.

    The cumulative product of ``1 - beta`` equals ``alpha_t^2`` at the schedule's
    level times, so the forward perturbation at level ``k`` is
    ``sqrt(prod(1 - beta)) x0 + sqrt(1 - prod(1 - beta)) eps``.
    """
    n = int(round(T / step)) + 1
    return linear_beta_schedule(n, beta_0, beta_T)


def cir_time_grid(schedule: NoiseSchedule) -> TimeGrid:
    """Levels of the schedule with features ``k / (K - 1)`` (normalized diffusion time)."""
    K = schedule.n_steps
    return TimeGrid.uniform(schedule.level_times, features=np.arange(K) / (K - 1))


class LevelFeature:
    """Maps a level time of ``schedule`` to its normalized level index."""

    def __init__(self, schedule: NoiseSchedule):
        self.schedule = schedule

    def __call__(self, t: float) -> float:
        return self.schedule.level_of_time(t) / (self.schedule.n_steps - 1)


def training_positions(N: int, r: int, mode: str = "interior") -> np.ndarray:
    """Series positions used for training windows (0-based).

    ``"interior"`` keeps ``2r <= i <= N - 2r - 2`` and raises when that is empty;
    ``"all"`` keeps every position; ``"auto"`` is interior unless empty.
    """
    interior = np.arange(2 * r, N - 2 * r - 1)
    if mode == "interior":
        if interior.size == 0:
            raise ValueError(f"no interior positions for N = {N}, r = {r} (need N > 4r + 2)")
        return interior
    if mode == "all":
        return np.arange(N)
    if mode == "auto":
        return interior if interior.size else np.arange(N)
    raise ValueError(f"unknown position mode {mode!r}")


def cir_hidden(r: int) -> tuple[int, int, int]:
    return (2 * r + 2, 6, 3)


@dataclass
class CirModel:
    net: MlpScoreNet
    radius: int
    mean: float
    std: float
    schedule: NoiseSchedule
    parametrization: str = "noise"
    meta: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "radius_r": self.radius,
            "mean": self.mean,
            "std": self.std,
            "parametrization": self.parametrization,
            "schedule_betas": [float(b) for b in self.schedule.betas],
            "schedule": self.schedule.describe(),
            **self.meta,
        }

    def save(self, path) -> None:
        save_model(path, [self.net], self.header())

    @classmethod
    def load(cls, path) -> "CirModel":
        nets, hdr = load_model(path)
        schedule = NoiseSchedule(np.array(hdr["schedule_betas"]), name=hdr["schedule"]["name"])
        known = {"radius_r", "mean", "std", "parametrization", "schedule_betas", "schedule"}
        meta = {k: v for k, v in hdr.items() if k not in known}
        return cls(nets[0], int(hdr["radius_r"]), float(hdr["mean"]), float(hdr["std"]), schedule, hdr["parametrization"], meta)


def cir_train(
    data: np.ndarray,
    r: int,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    positions: str = "interior",
    noise_mode: str = "independent",
    parametrization: str = "residual",
) -> tuple[CirModel, np.ndarray]:
    """Fit the weight-shared window network on standardized series.

    Training windows come from every trajectory at the positions selected by
    ``positions``.  ``noise_mode="shared"`` perturbs each trajectory with one
    noise path per step, so overlapping windows see the same noise; the
    default draws independent noise for every window.  Returns the model and
    the per-epoch loss trace.
    """
    X = np.asarray(data, dtype=float)
    M, N = X.shape
    mean, std = float(X.mean()), float(X.std())
    if std == 0:
        raise ValueError("training data are constant")
    Z = (X - mean) / std
    pos = training_positions(N, r, positions)
    idx = reflect_indices(N, r)
    pool = Z[:, idx[pos]].reshape(M * pos.size, 2 * r + 1)
    grid = cir_time_grid(schedule)
    cfg = TrainConfig(**{**cfg.__dict__, "time_grid": grid})
    net = MlpScoreNet.init([2 * r + 2, *cir_hidden(r), 1], stream(cfg.seed, "cir-init", r))
    if parametrization == "residual":
        # untrained model is then the exact score of standardized Gaussian data
        net.weights[-1][:] = 0.0

    if noise_mode == "independent":
        sampler = None
    elif noise_mode == "shared":
        traj_of = np.repeat(np.arange(M), pos.size)
        win_idx = np.tile(idx[pos], (M, 1))

        def sampler(rng, rows):
            E = rng.standard_normal((M, N))
            return E[traj_of[rows][:, None], win_idx[rows]]

    else:
        raise ValueError(f"unknown noise mode {noise_mode!r}")
    res = fit_dsm(net, pool, [r], cfg, stream(cfg.seed, "cir-train", r), parametrization, None, sampler)
    meta = {
        "positions": positions,
        "noise_mode": noise_mode,
        "train": {
            "learning_rate": cfg.learning_rate,
            "batch_size": cfg.batch_size,
            "n_epochs": cfg.n_epochs,
            "n_train_points": cfg.n_train_points,
            "weighting": cfg.weighting,
            "seed": cfg.seed,
        },
    }
    return CirModel(res.net, r, mean, std, schedule, parametrization, meta), res.loss_trace


class CirScoreField:
    """Score of standardized length-``N`` series from the shared window network."""

    def __init__(self, model: CirModel, N: int):
        self.model = model
        self.dim = int(N)
        self.idx = reflect_indices(N, model.radius)
        self.feature = LevelFeature(model.schedule)

    def evaluate(self, x: np.ndarray, t: float) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=float))
        n, N = X.shape
        win = X[:, self.idx].reshape(n * N, -1)
        inp = np.hstack([win, np.full((n * N, 1), self.feature(t))])
        _, sigma = ou_moments(t)
        u, _ = net_to_score(self.model.net.forward(inp), sigma, self.model.parametrization, z_own=X.reshape(-1, 1))
        return u.reshape(n, N)


def cir_generate(
    model: CirModel, N: int, n_series: int, seed: int, workers: int = 1, chunk_size: int = 1024
) -> np.ndarray:
    """Reverse-diffusion samples of ``n_series`` series, mapped back to data units."""
    field_ = CirScoreField(model, N)
    batch = sample_reverse(
        field_, model.schedule, n_series, seed=(seed, "cir-gen", model.radius), chunk_size=chunk_size, workers=workers
    )
    return model.mean + model.std * batch.data


def ensemble_acf(series: np.ndarray, max_lag: int):
    """Per-series sample ACF then ensemble mean and standard deviation per lag.

    Returns ``(mean, std, n_excluded)``; constant series are excluded.
    """
    S = np.atleast_2d(np.asarray(series, dtype=float))
    N = S.shape[1]
    if not 0 <= max_lag < N:
        raise ValueError(f"max_lag must lie in [0, {N - 1}]")
    Xc = S - S.mean(axis=1, keepdims=True)
    c0 = (Xc**2).sum(axis=1)
    keep = c0 > 0
    Xc, c0 = Xc[keep], c0[keep]
    acf = np.empty((Xc.shape[0], max_lag + 1))
    for lag in range(max_lag + 1):
        acf[:, lag] = (Xc[:, : N - lag] * Xc[:, lag:]).sum(axis=1) / c0
    n = acf.shape[0]
    std = acf.std(axis=0, ddof=1) if n > 1 else np.zeros(max_lag + 1)
    return acf.mean(axis=0), std, int((~keep).sum())


def histogram_distance(samples_a, samples_b, n_bins: int = 50) -> float:
    """Total-variation distance of normalized histograms on a pooled bin grid."""
    a = np.ravel(np.asarray(samples_a, dtype=float))
    b = np.ravel(np.asarray(samples_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    if lo == hi:
        return 0.0
    edges = np.linspace(lo, hi, n_bins + 1)
    pa = np.histogram(a, edges)[0] / a.size
    pb = np.histogram(b, edges)[0] / b.size
    return float(0.5 * np.abs(pa - pb).sum())


def histogram_densities(samples_a, samples_b, n_bins: int = 50):
    """Bin centers and densities of both samples on the pooled grid."""
    a, b = np.ravel(samples_a), np.ravel(samples_b)
    edges = np.linspace(min(a.min(), b.min()), max(a.max(), b.max()), n_bins + 1)
    da = np.histogram(a, edges, density=True)[0]
    db = np.histogram(b, edges, density=True)[0]
    return 0.5 * (edges[:-1] + edges[1:]), da, db


@dataclass
class CirEvaluation:
    radius: int
    tv_distance: float
    acf_lags: np.ndarray
    data_acf: tuple
    gen_acf: tuple
    data_mean: float
    gen_mean: float
    data_var: float
    gen_var: float

    def acf_within_band(self, lags) -> bool:
        m, s, _ = self.data_acf
        g = self.gen_acf[0]
        lags = np.asarray(lags)
        return bool(np.all(np.abs(g[lags] - m[lags]) <= s[lags]))

    def acf_abs_deviation(self, lags) -> float:
        lags = np.asarray(lags)
        return float(np.abs(self.gen_acf[0][lags] - self.data_acf[0][lags]).sum())


def evaluate_cir(data: np.ndarray, generated: np.ndarray, radius: int, max_lag: int = 10, n_bins: int = 50) -> CirEvaluation:
    return CirEvaluation(
        radius=radius,
        tv_distance=histogram_distance(data, generated, n_bins),
        acf_lags=np.arange(max_lag + 1),
        data_acf=ensemble_acf(data, max_lag),
        gen_acf=ensemble_acf(generated, max_lag),
        data_mean=float(np.mean(data)),
        gen_mean=float(np.mean(generated)),
        data_var=float(np.var(data)),
        gen_var=float(np.var(generated)),
    )
