"""Forward OU process, variance schedules and the reverse Euler-Maruyama sampler.

The forward process is ``dX = -X dt + sqrt(2) dW`` with transition kernel
``N(alpha_t x0, sigma_t^2 I)``.  Sampling integrates the reverse SDE

    Y_{n+1} = Y_n + (Y_n + 2 s(Y_n, T - t_n)) dt_n + sqrt(2 dt_n) xi_n

on a grid derived from a discrete variance schedule.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import yaml

from .rng import stream


class SamplingDiverged(RuntimeError):
    """A reverse trajectory produced a non-finite coordinate."""

    def __init__(self, step: int, n_bad: int, detail: str = ""):
        self.step = step
        self.n_bad = n_bad
        msg = f"sampling diverged at reverse step {step}: {n_bad} non-finite entries"
        super().__init__(msg + (f" ({detail})" if detail else ""))


def ou_moments(t):
    """Return ``(alpha_t, sigma_t) = (exp(-t), sqrt(1 - exp(-2t)))``.

    Accepts scalars or arrays.  ``sigma_t`` is evaluated with ``expm1`` so it
    keeps full relative precision for tiny ``t``.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError(f"diffusion time must be non-negative, got {t}")
    alpha = np.exp(-t_arr)
    sigma = np.sqrt(-np.expm1(-2.0 * t_arr))
    if alpha.ndim == 0:
        return float(alpha), float(sigma)
    return alpha, sigma


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete variance schedule ``beta_1 .. beta_N`` and its time bookkeeping.

    The reverse sampler takes step ``n`` (``n = 0 .. N-1``) of length
    ``reverse_dts[n] = -0.5 log(1 - beta_{N-n})`` and evaluates the score at
    physical time ``T - t_n``.  ``early_stop_t`` is the part of the horizon the
    reverse process never covers, so ``total_T = early_stop_t + sum(dt)``.
    """

    betas: np.ndarray
    early_stop_t: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=float)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("all betas must lie in (0, 1)")
        if self.early_stop_t < 0:
            raise ValueError("early_stop_t must be non-negative")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)

    @property
    def n_steps(self) -> int:
        return int(self.betas.size)

    @property
    def forward_dts(self) -> np.ndarray:
        """OU time added by forward step ``k`` (``k = 1 .. N``)."""
        return -0.5 * np.log1p(-self.betas)

    @property
    def reverse_dts(self) -> np.ndarray:
        return self.forward_dts[::-1].copy()

    @property
    def level_times(self) -> np.ndarray:
        """OU time of noise level ``k`` (after ``k`` forward steps), ``k = 1 .. N``."""
        return self.early_stop_t + np.cumsum(self.forward_dts)

    @property
    def total_T(self) -> float:
        return float(self.early_stop_t + self.reverse_dts.sum())

    @property
    def grid(self) -> np.ndarray:
        """Reverse-time grid ``t_0 = 0 < ... < t_N = T - early_stop_t``."""
        return np.concatenate([[0.0], np.cumsum(self.reverse_dts)])

    @property
    def score_times(self) -> np.ndarray:
        """Physical time ``T - t_n`` at which step ``n`` evaluates the score."""
        return self.level_times[::-1].copy()

    def level_of_time(self, t: float) -> int:
        """Index ``k - 1`` of the noise level whose OU time equals ``t``."""
        lt = self.level_times
        k = int(np.argmin(np.abs(lt - t)))
        if not math.isclose(lt[k], t, rel_tol=1e-9, abs_tol=1e-15):
            raise ValueError(f"time {t} is not a level of schedule {self.name!r}")
        return k

    def describe(self) -> dict:
        return {
            "name": self.name,
            "n_steps": self.n_steps,
            "beta_first": float(self.betas[0]),
            "beta_last": float(self.betas[-1]),
            "early_stop_t": float(self.early_stop_t),
            "total_T": self.total_T,
        }


def linear_beta_schedule(
    n_steps: int, beta_1: float, beta_N: float, early_stop_t: float = 0.0
) -> NoiseSchedule:
    """Linear schedule ``beta_n = (beta_N - beta_1)(n - 1)/(N - 1) + beta_1``."""
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    if not 0 < beta_1 <= beta_N < 1:
        raise ValueError(f"need 0 < beta_1 <= beta_N < 1, got {beta_1}, {beta_N}")
    n = np.arange(1, n_steps + 1)
    betas = (beta_N - beta_1) * (n - 1) / (n_steps - 1) + beta_1
    name = f"linear(N={n_steps},beta_1={beta_1!r},beta_N={beta_N!r})"
    return NoiseSchedule(betas, early_stop_t=early_stop_t, name=name)


@dataclass(frozen=True)
class TimeGrid:
    """Diffusion times with quadrature weights and network time features.

    ``sum(weights * f(times))`` approximates either a time average
    (:meth:`uniform`) or a time integral (:meth:`gauss_legendre`).
    ``features`` is the time value fed to a network at each node.
    """

    times: np.ndarray
    weights: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        for name in ("times", "weights", "features"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.times.shape == self.weights.shape == self.features.shape):
            raise ValueError("times, weights and features must have equal shapes")

    def __len__(self) -> int:
        return int(self.times.size)

    @classmethod
    def uniform(cls, times, features=None) -> "TimeGrid":
        times = np.asarray(times, dtype=float)
        feats = times if features is None else features
        return cls(times, np.full(times.size, 1.0 / times.size), feats)

    @classmethod
    def gauss_legendre(cls, edges, order: int = 4) -> "TimeGrid":
        """Composite Gauss-Legendre rule over the panels delimited by ``edges``."""
        edges = np.asarray(edges, dtype=float)
        x, w = np.polynomial.legendre.leggauss(order)
        lo, hi = edges[:-1, None], edges[1:, None]
        times = (0.5 * (hi - lo) * x + 0.5 * (hi + lo)).ravel()
        weights = (0.5 * (hi - lo) * w).ravel()
        return cls(times, weights, times)


@runtime_checkable
class ScoreField(Protocol):
    """Anything that maps a batch ``x`` (n x d) and a time to scores (n x d)."""

    dim: int

    def evaluate(self, x: np.ndarray, t: float) -> np.ndarray: ...


class LinearScoreField:
    """Score ``s(x, t) = -P(t) x`` for a time-dependent symmetric matrix ``P``.

    Parameters
    ----------
    matrix_at : callable
        ``t -> P(t)``, a ``d x d`` array.
    dim : int
    """

    def __init__(self, matrix_at, dim: int):
        self.matrix_at = matrix_at
        self.dim = int(dim)

    def evaluate(self, x: np.ndarray, t: float) -> np.ndarray:
        return -np.asarray(x) @ self.matrix_at(t).T


@dataclass
class SampleBatch:
    data: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def to_csv(self, path: str | Path, sidecar: bool = True) -> None:
        """Write one sample per row with header ``x0,...,x{d-1}``.

        With ``sidecar`` the metadata goes to ``<path>.meta.yaml``.
        """
        write_matrix_csv(path, self.data, [f"x{k}" for k in range(self.dim)])
        if sidecar:
            Path(str(path) + ".meta.yaml").write_text(
                yaml.safe_dump(_plain(self.meta), sort_keys=True)
            )

    @classmethod
    def from_csv(cls, path: str | Path) -> "SampleBatch":
        header, data = read_matrix_csv(path)
        meta_path = Path(str(path) + ".meta.yaml")
        meta = yaml.safe_load(meta_path.read_text()) if meta_path.exists() else {}
        return cls(data, meta or {})


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def format_float(v: float) -> str:
    """Shortest decimal string that round-trips to the same double."""
    return repr(float(v))


def write_matrix_csv(path: str | Path, data: np.ndarray, header: Sequence[str]) -> None:
    data = np.atleast_2d(np.asarray(data, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in data:
            w.writerow([format_float(v) for v in row])


def read_matrix_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in row] for row in body], dtype=float)
    return header, data.reshape(len(body), len(header))


def forward_perturb(x0, t: float, rng: np.random.Generator):
    """Draw ``x_t = alpha_t x0 + sigma_t eps``; returns ``(x_t, eps)``."""
    alpha, sigma = ou_moments(t)
    x0 = np.asarray(x0, dtype=float)
    eps = rng.standard_normal(x0.shape)
    return alpha * x0 + sigma * eps, eps


def reverse_em_step(y, dt: float, score_at_y, rng: np.random.Generator | None = None, xi=None):
    """One Euler-Maruyama step of the reverse SDE.

    The Gaussian increment is drawn from ``rng`` unless ``xi`` is supplied.
    """
    if dt <= 0:
        raise ValueError(f"step size must be positive, got {dt}")
    y = np.asarray(y, dtype=float)
    if xi is None:
        xi = rng.standard_normal(y.shape)
    return y + (y + 2.0 * np.asarray(score_at_y)) * dt + math.sqrt(2.0 * dt) * xi


def _run_chunk(scores, schedule: NoiseSchedule, n: int, d: int, gen: np.random.Generator):
    """Integrate every score field from shared initial states and noise."""
    y0 = gen.standard_normal((n, d))
    states = [y0.copy() for _ in scores]
    dts = schedule.reverse_dts
    times = schedule.score_times
    eye = np.eye(d)
    for step, (dt, t) in enumerate(zip(dts, times)):
        xi = gen.standard_normal((n, d))
        noise_scale = math.sqrt(2.0 * dt)
        for k, score in enumerate(scores):
            y = states[k]
            if isinstance(score, LinearScoreField):
                # y + (y - 2 y P^T) dt == y @ ((1 + dt) I - 2 dt P)^T
                A = (1.0 + dt) * eye - (2.0 * dt) * score.matrix_at(t)
                y = y @ A.T
                y += noise_scale * xi
            else:
                y = reverse_em_step(y, dt, score.evaluate(y, t), xi=xi)
            if not np.isfinite(y).all():
                raise SamplingDiverged(step, int((~np.isfinite(y)).sum()), f"field {k}")
            states[k] = y
    return states


def _chunk_task(args):
    scores, schedule, n, d, seed, chunk = args
    keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    return _run_chunk(scores, schedule, n, d, stream(*keys, "reverse", chunk))


def sample_reverse_coupled(
    scores: Sequence[ScoreField],
    schedule: NoiseSchedule,
    n_samples: int,
    seed: int | tuple,
    dim: int | None = None,
    chunk_size: int = 4096,
    workers: int = 1,
) -> list[SampleBatch]:
    """Run the reverse sampler for several score fields on common random numbers.

    All fields share the initial states and the Gaussian increments.  Samples
    are split into fixed chunks of ``chunk_size`` and chunk ``c`` draws from
    stream ``(seed, "reverse", c)``, so the result does not depend on
    ``workers``.  ``seed`` may also be a tuple of stream keys.
    """
    if not scores:
        raise ValueError("need at least one score field")
    d = int(dim if dim is not None else scores[0].dim)
    for s in scores:
        if int(s.dim) != d:
            raise ValueError(f"score dimension {s.dim} does not match d = {d}")
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    seed_meta = [int(k) if not isinstance(k, str) else k for k in seed] if isinstance(seed, (tuple, list)) else int(seed)
    meta = {"seed": seed_meta, "schedule": schedule.describe()}
    if n_samples == 0:
        return [SampleBatch(np.zeros((0, d)), dict(meta)) for _ in scores]
    sizes = [min(chunk_size, n_samples - s) for s in range(0, n_samples, chunk_size)]
    tasks = [(list(scores), schedule, n, d, seed, c) for c, n in enumerate(sizes)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_chunk_task, tasks))
    else:
        results = [_chunk_task(t) for t in tasks]
    return [
        SampleBatch(np.concatenate([res[k] for res in results], axis=0), dict(meta))
        for k in range(len(scores))
    ]


def sample_reverse(
    score: ScoreField,
    schedule: NoiseSchedule,
    n_samples: int,
    seed: int,
    dim: int | None = None,
    chunk_size: int = 4096,
    workers: int = 1,
) -> SampleBatch:
    """Draw ``n_samples`` by integrating the reverse SDE from ``N(0, I)``."""
    return sample_reverse_coupled(
        [score], schedule, n_samples, seed, dim=dim, chunk_size=chunk_size, workers=workers
    )[0]
